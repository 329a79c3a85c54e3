import numpy as np
import pytest

from ett.backbone import Backbone, ViTConfig
from ett.engine import (
    EpisodeResult,
    Hparams,
    evaluate,
    hparams_from_mapping,
    overfit_probe,
    pretrain_toy,
    sign_test,
    summarize,
)
from ett.episodes import DatasetSource
from ett.tuner import VariantSpec

SMALL = ViTConfig(image_size=16, patch_size=8, layers=2, heads=2, width=16, ffn_hidden=32)


@pytest.fixture(scope="module")
def base():
    return DatasetSource(6, split="base", seed=0, image_size=16, images_per_class=20)


@pytest.fixture(scope="module")
def novel():
    return DatasetSource(8, split="novel", seed=0, image_size=16, images_per_class=14)


class TestPretrain:
    def test_deterministic_and_learns(self, base):
        cfg = ViTConfig(image_size=16, patch_size=4, layers=2, heads=2, width=16, ffn_hidden=32)
        runs = [pretrain_toy(base, cfg, epochs=30, rng=np.random.default_rng(1), lr=3e-3,
                             batch_size=32) for _ in range(2)]
        assert runs[0][0].checksum() == runs[1][0].checksum()
        assert runs[0][1].train_loss == runs[1][1].train_loss
        report = runs[0][1]
        assert report.val_accuracy > 1.0 / 6 + 0.1
        assert np.mean(report.train_loss[-3:]) < np.mean(report.train_loss[:3])

    def test_weights_are_float32_exact_and_frozen(self, base):
        model, _ = pretrain_toy(base, SMALL, epochs=1)
        for p in model.params.values():
            assert not p.requires_grad
            assert np.array_equal(p.data, p.data.astype(np.float32))

    def test_rejects_novel_split(self, novel):
        with pytest.raises(ValueError):
            pretrain_toy(novel, SMALL, epochs=1)


class TestEvaluate:
    def test_deterministic_across_workers(self, novel):
        model = Backbone(SMALL, seed=2)
        hp = Hparams(steps=2, d_proj=8)
        kw = dict(seed=4, hparams=hp, max_shot=3, M=2)
        a = evaluate(model, novel, VariantSpec("ett"), 3, workers=1, **kw)
        b = evaluate(model, novel, VariantSpec("ett"), 3, workers=2, **kw)
        assert [r.record() for r in a.results] == [r.record() for r in b.results]
        assert a.record() == b.record()

    def test_variants_share_episodes(self, novel):
        model = Backbone(SMALL, seed=2)
        hp = Hparams(steps=1, d_proj=8)
        a = evaluate(model, novel, VariantSpec("proto"), 4, seed=9, hparams=hp, max_shot=3, M=2)
        b = evaluate(model, novel, VariantSpec("ltncc"), 4, seed=9, hparams=hp, max_shot=3, M=2)
        assert [(r.way, r.shots) for r in a.results] == [(r.way, r.shots) for r in b.results]

    def test_callback_order(self, novel):
        model = Backbone(SMALL, seed=2)
        seen = []
        evaluate(model, novel, VariantSpec("proto"), 3, max_shot=3, M=2,
                 on_result=lambda r: seen.append(r.episode_id))
        assert seen == [0, 1, 2]

    def test_zero_episodes(self, novel):
        with pytest.raises(ValueError):
            evaluate(Backbone(SMALL), novel, VariantSpec("proto"), 0)


def _result(acc):
    return EpisodeResult(0, 5, [1] * 5, 1.0, acc, 0, 0)


class TestSummarize:
    def test_interval(self):
        accs = [0.5, 0.7, 0.6, 0.9]
        s = summarize("x", [_result(a) for a in accs])
        assert s.mean_acc == pytest.approx(0.675)
        assert s.ci95 == pytest.approx(1.96 * np.std(accs, ddof=1) / 2)
        assert s.ci_defined

    def test_single_episode_has_no_interval(self):
        s = summarize("x", [_result(0.4)])
        assert s.mean_acc == 0.4 and s.ci95 == 0.0 and not s.ci_defined


def test_overfit_probe_filters_low_shot(novel):
    model = Backbone(SMALL, seed=2)
    hp = Hparams(steps=1, d_proj=8)
    report = overfit_probe(model, novel, seed=1, episodes=3, max_shot=5, M=2, hparams=hp)
    assert len(report.episode_ids) == 3
    assert all(s <= 2 for s in report.min_shots)
    assert [r.episode_id for r in report.full] == report.episode_ids
    assert set(report.means()) == {"full_support", "full_query", "ett_support", "ett_query"}


def test_hparams_from_mapping():
    assert hparams_from_mapping({"lr": 1e-3}).lr == 1e-3
    with pytest.raises(ValueError):
        hparams_from_mapping({"learning_rate": 1e-3})


class TestSignTest:
    def test_ties_dropped(self):
        wins, losses, p = sign_test([0.5, 0.5, 0.5, 0.4], [0.5, 0.6, 0.7, 0.3])
        assert (wins, losses) == (2, 1)
        assert p == pytest.approx(0.5)

    def test_all_wins(self):
        wins, losses, p = sign_test(np.zeros(10), np.ones(10))
        assert (wins, losses) == (10, 0) and p == pytest.approx(2.0 ** -10)
