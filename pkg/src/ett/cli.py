"""Command-line entry point: gradcheck, pretrain, eval, ablate, dump-episodes."""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, config as cfgmod
from .backbone import Backbone
from .engine import Hparams, evaluate, episode_gradcheck, make_tuner, pretrain_toy
from .episodes import DatasetSource, episode_rng, sample_episode
from .tuner import VariantSpec

log = logging.getLogger("ett")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad configuration or file system problem (exit code 2)."""


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--episodes", type=int)
    common.add_argument("--variant", help="e.g. ett, ltncc, ett,init=avg,no-pr")
    common.add_argument("--workers", type=int)
    common.add_argument("--out", help="existing output directory")
    common.add_argument("--domain-shift", type=float, dest="domain_shift")
    common.add_argument("--checkpoint", help="backbone checkpoint for eval/ablate/dump")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ett", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("gradcheck", "finite-difference check of the episode loss on the micro config"),
        ("pretrain", "toy supervised pre-training on the base split"),
        ("eval", "test-time tuning over sampled episodes"),
        ("ablate", "evaluate every cell of a variant grid on shared episodes"),
        ("dump-episodes", "write episodes and pre/post-tuning embeddings as tensor files"),
    ]:
        sub.add_parser(name, parents=[common], help=text)
    return parser


def _resolve(args):
    mapping = cfgmod.load_mapping(args.config) if args.config else {}
    overrides = {"seed": args.seed, "episodes": args.episodes, "workers": args.workers,
                 "out": args.out, "data.domain_shift": args.domain_shift,
                 "checkpoint": args.checkpoint}
    if args.variant is not None:
        overrides["variant"] = cfgmod.parse_variant(args.variant).to_dict()
    return cfgmod.from_mapping(cfgmod.merge(mapping, overrides))


def _out_dir(cfg, required=True):
    if cfg.out is None:
        if required:
            raise UsageError("an output directory is required (--out)")
        return None
    out = Path(cfg.out)
    if not out.is_dir():
        raise UsageError(f"output directory {out} does not exist")
    return out


def _write_config(cfg, out):
    (out / "config.yaml").write_text(cfg.dump())


def _load_backbone(cfg):
    if cfg.checkpoint is None:
        raise UsageError("a backbone checkpoint is required (--checkpoint)")
    try:
        model = Backbone.load(cfg.checkpoint)
    except (OSError, checkpoint.CheckpointError) as exc:
        raise UsageError(f"cannot load checkpoint {cfg.checkpoint}: {exc}") from None
    if model.config != cfg.backbone:
        log.info("checkpoint config %s overrides the configured backbone", model.config)
    return model


def _novel(cfg, image_size):
    d = cfg.data
    return DatasetSource(d.novel_classes, split="novel", domain_shift=d.domain_shift,
                         seed=d.seed, images_per_class=d.images_per_class,
                         image_size=image_size)


def _jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _run_eval(cfg, model, variant, results_path):
    t0 = time.perf_counter()
    lines = []

    def on_result(r):
        lines.append(r.record())
        log.info("episode %d way %d acc %.4f (%.1fs)", r.episode_id, r.way, r.acc_query,
                 r.wall_time)

    source = _novel(cfg, model.config.image_size)
    summary = evaluate(model, source, variant, cfg.episodes, seed=cfg.seed,
                       hparams=cfg.hparams, max_shot=cfg.data.max_shot, M=cfg.data.queries,
                       workers=cfg.workers, on_result=on_result)
    _jsonl(results_path, lines + [summary.record()])
    log.info("%s: mean %.4f +- %.4f over %d episodes in %.1fs", summary.variant,
             summary.mean_acc, summary.ci95, summary.episodes, time.perf_counter() - t0)
    return summary


# -- commands ---------------------------------------------------------------------
def cmd_gradcheck(cfg):
    report = episode_gradcheck(seed=cfg.seed)
    print(report.table())
    if report.passed:
        print(f"ok: max relative error {report.max_rel_error:.3e} < {report.tol:g}")
        return EXIT_OK
    worst = report.worst
    print(f"FAILED: worst offender {worst.name} (rel error {worst.max_rel_error:.3e})")
    return EXIT_FAIL


def cmd_pretrain(cfg):
    out = _out_dir(cfg)
    p = cfg.pretrain
    base = DatasetSource(cfg.data.base_classes, split="base", seed=cfg.data.seed,
                         images_per_class=cfg.data.images_per_class,
                         image_size=cfg.backbone.image_size)
    model, report = pretrain_toy(base, cfg.backbone, epochs=p.epochs,
                                 rng=np.random.default_rng(cfg.seed), batch_size=p.batch_size,
                                 lr=p.lr, weight_decay=p.weight_decay, init_seed=cfg.seed)
    path = out / "backbone.ett"
    model.save(path)
    _write_config(cfg, out)
    _jsonl(out / "pretrain.jsonl", [{"epochs": p.epochs, "val_accuracy": report.val_accuracy,
                                     "final_loss": report.train_loss[-1]}])
    print(path)
    return EXIT_OK


def cmd_eval(cfg):
    out = _out_dir(cfg)
    model = _load_backbone(cfg)
    _write_config(cfg, out)
    summary = _run_eval(cfg, model, cfg.variant, out / "results.jsonl")
    print(json.dumps(summary.record(), sort_keys=True))
    return EXIT_OK


def _grid(cfg):
    axes = sorted(cfg.ablate)
    base = cfg.variant.to_dict()
    cells = []
    for combo in itertools.product(*(cfg.ablate[a] for a in axes)):
        spec = dict(base, **dict(zip(axes, combo)))
        try:
            cells.append(VariantSpec(**spec))
        except ValueError as exc:
            raise UsageError(f"bad ablation cell {spec}: {exc}") from None
    return cells


def cmd_ablate(cfg):
    out = _out_dir(cfg)
    model = _load_backbone(cfg)
    cells = _grid(cfg)
    _write_config(cfg, out)
    cell_dir = out / "cells"
    cell_dir.mkdir(exist_ok=True)
    rows = []
    for i, spec in enumerate(cells):
        summary = _run_eval(cfg, model, spec, cell_dir / f"{i:02d}.jsonl")
        rows.append({**summary.record(), "cell": i, "spec": spec.to_dict()})
    _jsonl(out / "ablate.jsonl", rows)
    for r in rows:
        print(f"{r['variant']:32s} {r['mean_acc']:.4f} +- {r['ci95']:.4f}")
    return EXIT_OK


def cmd_dump_episodes(cfg):
    out = _out_dir(cfg)
    model = _load_backbone(cfg)
    source = _novel(cfg, model.config.image_size)
    _write_config(cfg, out)
    hp: Hparams = cfg.hparams
    for i in range(cfg.episodes):
        ep = sample_episode(source, episode_rng(cfg.seed, i), cfg.data.max_shot,
                            cfg.data.queries)
        tuner = make_tuner(model, cfg.variant, hp, cfg.seed).fit(ep.support_images,
                                                                  ep.support_labels)
        tensors = {
            "support.images": ep.support_images,
            "support.labels": ep.support_labels.astype(np.float64),
            "query.images": ep.query_images,
            "query.labels": ep.query_labels.astype(np.float64),
            "query.embed_pre": model.features(ep.query_images),
            "query.embed_post": tuner.transform(ep.query_images),
            "query.logits": tuner.decision_function(ep.query_images),
            "classes": np.asarray(ep.classes, dtype=np.float64),
        }
        checkpoint.save(out / f"episode_{i:04d}.ett", tensors, dtype="float64")
    print(f"wrote {cfg.episodes} episodes to {out}")
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "dump-episodes": cmd_dump_episodes,
}


def main(argv=None):
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
