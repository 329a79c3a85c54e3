import hashlib
import json

import pytest

ACCEPTANCE_LINES = {}


def record_criterion(number, title, passed, detail):
    ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}: {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


@pytest.fixture(scope="session")
def pretrained_backbone(request):
    """Toy-pretrained desk backbone, cached across sessions by its recipe."""
    from ett.backbone import Backbone
    from ett.config import RunConfig
    from ett.engine import pretrain_toy
    from ett.episodes import DatasetSource

    cfg = RunConfig()
    recipe = {"data": cfg.to_dict()["data"], "pretrain": cfg.to_dict()["pretrain"],
              "backbone": cfg.to_dict()["backbone"], "seed": cfg.seed}
    key = hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest()[:16]
    path = request.config.cache.mkdir("ett-backbone") / f"{key}.ett"
    if path.exists():
        return Backbone.load(path)
    base = DatasetSource(cfg.data.base_classes, split="base", seed=cfg.data.seed,
                         images_per_class=cfg.data.images_per_class,
                         image_size=cfg.backbone.image_size)
    import numpy as np

    p = cfg.pretrain
    model, _ = pretrain_toy(base, cfg.backbone, epochs=p.epochs,
                            rng=np.random.default_rng(cfg.seed), batch_size=p.batch_size,
                            lr=p.lr, weight_decay=p.weight_decay, init_seed=cfg.seed)
    model.save(path)
    return model
