"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The comparative criteria (7-9) run on the toy-pretrained desk backbone from
the ``pretrained_backbone`` fixture, at the settings in ``COMPARE`` and
``PROBE``.  Those settings were chosen on a separate tuning seed; the
episode seed used here was not looked at while choosing them.
"""
import time

import numpy as np
import pytest
from conftest import record_criterion
from reference import attentive_embedding_loops, random_params, reference_forward
from scipy import stats

from ett import apt, cli, protoreg
from ett.backbone import Backbone, ViTConfig, count_backbone_params
from ett.engine import Hparams, episode_gradcheck, evaluate, overfit_probe, sign_test
from ett.episodes import DatasetSource, episode_rng, plan_episode, sample_episode
from ett.numerics import Tensor
from ett.tuner import (
    EpisodeTuner,
    TuningState,
    VariantSpec,
    count_trainable,
    ett_param_formula,
)

EPISODE_SEED = 2024
COMPARE = dict(shift=1.0, novel_classes=10, episodes=100, hparams=Hparams(lr=3e-3))
# both methods share one optimiser setting, long enough for both to fit the support set
PROBE = dict(shift=1.0, novel_classes=10, episodes=20, hparams=Hparams(lr=1e-3, steps=200),
             full_hparams=Hparams(lr=1e-3, steps=200))

pytestmark = pytest.mark.acceptance


def test_c01_gradient_fidelity():
    t0 = time.perf_counter()
    report = episode_gradcheck()
    elapsed = time.perf_counter() - t0
    names = sorted(e.name for e in report.entries)
    expected = sorted(["prefix", "g.W1", "g.W2", "dra.delta_a", "dra.delta_f", "phi.W", "psi.W"])
    ok = report.max_rel_error < 1e-4 and names == expected and elapsed < 60
    record_criterion(1, "gradient fidelity", ok,
                     f"max rel error {report.max_rel_error:.2e} (< 1e-4) over {len(names)} "
                     f"tensors in {elapsed:.1f}s (< 60s)")
    assert ok, report.table()


def _state(n_way, width, layers, hidden, d_proj):
    rng = np.random.default_rng(0)
    from ett import head
    from ett.dra import DomainResidualAdapter

    return TuningState(None, head.LinearTransform(width),
                       prefix=apt.init_prefix(np.zeros((n_way, width))),
                       g=apt.BottleneckG(width, layers, hidden, rng=rng),
                       dra=DomainResidualAdapter(layers, width),
                       psi=protoreg.Projector(width, d_proj, rng=rng))


def test_c02_parameter_count_formula():
    rng = np.random.default_rng(11)
    configs = [(10, 384, 12, 192, 64)]
    for _ in range(5):
        configs.append((int(rng.integers(5, 51)), int(rng.integers(4, 97)),
                        int(rng.integers(1, 7)), int(rng.integers(2, 49)),
                        int(rng.integers(4, 97))))
    exact = all(count_trainable(_state(*c)) == (c[0] + c[3] + c[4] + c[1]) * c[1]
                + 2 * (c[3] + 1) * c[2] * c[1] for c in configs)
    ref = count_trainable(_state(*configs[0]))
    ratio = ref / count_backbone_params(ViTConfig.vit_small())
    ok = exact and ref == 2_028_288 and abs(ratio - 0.09) < 0.005
    ok = ok and ref == ett_param_formula(10, 384, 192, 64, 12)
    record_criterion(2, "parameter-count formula", ok,
                     f"{len(configs)} configs exact; ViT-small {ref:,} trainable, "
                     f"{100 * ratio:.2f}% of backbone")
    assert ok


def test_c03_step_zero_equivalence(pretrained_backbone):
    src = DatasetSource(20, split="novel", seed=0)
    worst = 0.0
    for i in range(20):
        ep = sample_episode(src, episode_rng(EPISODE_SEED, i))
        proto = EpisodeTuner(pretrained_backbone, pipeline="proto").fit(
            ep.support_images, ep.support_labels).decision_function(ep.query_images)
        ett = EpisodeTuner(pretrained_backbone, pipeline="ett", steps=0).fit(
            ep.support_images, ep.support_labels)
        diff = np.abs(ett.decision_function(ep.query_images, use_prefix=False) - proto).max()
        worst = max(worst, float(diff))
    ok = worst <= 1e-10
    record_criterion(3, "step-0 equivalence", ok,
                     f"max |ett - proto| logit gap {worst:.1e} over 20 episodes (<= 1e-10)")
    assert ok


def test_c04_attention_oracle():
    cfg = ViTConfig.micro()
    rng = np.random.default_rng(12)
    worst_feat = worst_attn = worst_row = 0.0
    for _ in range(50):
        bb = Backbone(cfg, random_params(cfg, rng))
        n_p = int(rng.integers(1, 5))
        img = rng.normal(size=(3, cfg.image_size, cfg.image_size))
        inj = [(rng.normal(size=(n_p, cfg.width)), rng.normal(size=(n_p, cfg.width)))
               for _ in range(cfg.layers)]
        feat, attn, _, _ = reference_forward(bb.params, cfg, img, injection=inj)
        trace = bb.forward(img[None], injection=[tuple(map(Tensor, p)) for p in inj],
                           record=True)
        worst_feat = max(worst_feat, np.abs(trace.features.data[0] - feat).max())
        for got, want in zip(trace.attentions, attn):
            worst_attn = max(worst_attn, np.abs(got[0] - want).max())
            worst_row = max(worst_row, np.abs(got.sum(axis=-1) - 1.0).max())
    ok = max(worst_feat, worst_attn, worst_row) <= 1e-10
    record_criterion(4, "attention oracle", ok,
                     f"50 instances: attention err {worst_attn:.1e}, feature err "
                     f"{worst_feat:.1e}, row-sum err {worst_row:.1e} (<= 1e-10)")
    assert ok


def test_c05_attentive_prototype_oracle():
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(50):
        tokens = rng.normal(size=(1, 4, 8))
        scores = 3.0 * rng.normal(size=(1, 2, 4))
        got = apt.attentive_embedding(tokens, scores)[0]
        worst = max(worst, np.abs(got - attentive_embedding_loops(tokens[0], scores[0])).max())
    tokens = rng.normal(size=(5, 16, 64))
    uniform = np.abs(apt.attentive_embedding(tokens, np.full((5, 4, 16), -1.3))
                     - tokens.mean(axis=1)).max()
    ok = worst <= 1e-10 and uniform <= 1e-12
    record_criterion(5, "attentive prototype oracle", ok,
                     f"oracle err {worst:.1e} (<= 1e-10); uniform-attention err {uniform:.1e} "
                     f"(<= 1e-12)")
    assert ok


def _rows(rng, n, k):
    z = rng.normal(size=(n, k)) * rng.uniform(0.1, 4.0)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_c06_distillation_properties(pretrained_backbone):
    rng = np.random.default_rng(14)
    gibbs = equal = True
    for _ in range(1000):
        k = int(rng.integers(2, 12))
        a, b = _rows(rng, 1, k), _rows(rng, 1, k)
        h_ab = protoreg.distill_loss(a, Tensor(b)).item()
        h_aa = protoreg.distill_loss(a, Tensor(a)).item()
        gibbs &= h_ab >= h_aa - 1e-12
        equal &= abs(-(a * np.log(a)).sum() - h_aa) <= 1e-10
        equal &= (h_ab - h_aa > 1e-10) or np.allclose(a, b)

    # in a full episode loss, the teacher branch contributes nothing to psi's gradient
    src = DatasetSource(10, split="novel", seed=0)
    ep = sample_episode(src, episode_rng(EPISODE_SEED, 0))
    X, y = ep.support_images, ep.support_labels
    tuner = EpisodeTuner(pretrained_backbone, pipeline="ett")
    state = tuner._build_state(tuner._check_params(), X, y, ep.way, np.random.default_rng(0))
    tuner.loss_terms(state, X, y, ep.way)  # initialises the centre
    teacher = protoreg.teacher_distribution(state.teacher_protos, state.psi.W,
                                            state.center.value, tuner.tau)
    grads = []
    for fixed in (None, teacher.data.copy()):
        # None: the tuner builds the teacher from psi itself; otherwise a constant copy
        for p in state.trainable().values():
            p.grad = None
        tuner.loss_terms(state, X, y, ep.way, teacher=fixed)[0].backward()
        grads.append(state.psi.W.grad.copy())
    no_teacher_grad = not teacher.requires_grad and np.array_equal(grads[0], grads[1])
    ok = gibbs and equal and no_teacher_grad
    record_criterion(6, "distillation loss properties", ok,
                     f"Gibbs {'holds' if gibbs else 'violated'} on 1000 pairs, equality case "
                     f"{'exact' if equal else 'broken'}, teacher gradient "
                     f"{'zero' if no_teacher_grad else 'non-zero'}")
    assert ok


@pytest.fixture(scope="module")
def comparison(pretrained_backbone):
    """proto, ltncc, apt and ett on the same shifted episodes."""
    src = DatasetSource(COMPARE["novel_classes"], split="novel",
                        domain_shift=COMPARE["shift"], seed=0)
    out, times = {}, {}
    for name in ("proto", "ltncc", "ett", "apt"):
        t0 = time.perf_counter()
        summary = evaluate(pretrained_backbone, src, VariantSpec(name), COMPARE["episodes"],
                           seed=EPISODE_SEED, hparams=COMPARE["hparams"])
        times[name] = time.perf_counter() - t0
        out[name] = np.array([r.acc_query for r in summary.results])
    return out, times


def test_c07_ablation_directionality(comparison):
    acc, times = comparison
    runtime = times["proto"] + times["ltncc"] + times["ett"]
    parts, ok = [], runtime < 20 * 60
    for lo, hi in (("proto", "ltncc"), ("ltncc", "ett")):
        wins, losses, p = sign_test(acc[lo], acc[hi])
        good = acc[hi].mean() > acc[lo].mean() and p < 0.05
        ok &= good
        parts.append(f"{lo} {acc[lo].mean():.4f} < {hi} {acc[hi].mean():.4f} "
                     f"({wins}/{losses}, p={p:.3g})")
    record_criterion(7, "ablation directionality", ok,
                     "; ".join(parts) + f"; {runtime / 60:.1f} min (< 20)")
    assert ok


def test_c08_domain_shift_efficacy(comparison):
    acc, _ = comparison
    wins, losses, p = sign_test(acc["apt"], acc["ett"])
    ok = acc["ett"].mean() > acc["apt"].mean() and p < 0.05
    record_criterion(8, "domain-shift efficacy", ok,
                     f"shift 1.0: ett {acc['ett'].mean():.4f} vs apt {acc['apt'].mean():.4f} "
                     f"({wins}/{losses}, p={p:.3g})")
    assert ok


def test_c09_overfitting_probe(pretrained_backbone):
    src = DatasetSource(PROBE["novel_classes"], split="novel", domain_shift=PROBE["shift"],
                        seed=0)
    report = overfit_probe(pretrained_backbone, src, seed=EPISODE_SEED,
                           episodes=PROBE["episodes"], hparams=PROBE["hparams"],
                           full_hparams=PROBE["full_hparams"])
    m = report.means()
    full_q = [r.acc_query for r in report.full]
    ett_q = [r.acc_query for r in report.ett]
    wins, losses, p = sign_test(full_q, ett_q)
    fits = m["full_support"] >= 0.99 and m["ett_support"] >= 0.99
    ok = fits and max(report.min_shots) <= 2 and m["ett_query"] > m["full_query"] and p < 0.05
    record_criterion(9, "overfitting probe", ok,
                     f"support full {m['full_support']:.3f} / ett {m['ett_support']:.3f} "
                     f"(>= 0.99); query full {m['full_query']:.4f} vs ett {m['ett_query']:.4f} "
                     f"({wins}/{losses}, p={p:.3g})")
    assert ok


def test_c10_determinism(tmp_path, pretrained_backbone):
    ckpt = tmp_path / "bb.ett"
    pretrained_backbone.save(ckpt)
    common = ["--checkpoint", str(ckpt), "--episodes", "3", "--seed", "5",
              "--domain-shift", "0.5"]
    runs = {}
    for cmd, variant, name in [("eval", "ett", "results.jsonl"),
                               ("ablate", "ett", "ablate.jsonl"),
                               ("dump-episodes", "ltncc", "episode_0002.ett")]:
        blobs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{cmd}-{rep}"
            out.mkdir()
            assert cli.main([cmd, "--out", str(out), "--variant", variant, *common]) == 0
            blobs.append((out / name).read_bytes())
        runs[cmd] = blobs[0] == blobs[1]
    ok = all(runs.values())
    record_criterion(10, "determinism", ok,
                     ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in runs.items()))
    assert ok


def test_c11_sampler_conformance():
    ways, contract = [], True
    for i in range(10_000):
        plan = plan_episode(60, episode_rng(EPISODE_SEED, i))
        ways.append(plan.way)
        contract &= min(plan.shots) >= 1
        contract &= bool(np.all(np.bincount(plan.query_labels, minlength=plan.way) == 10))
        contract &= not set(plan.support_index) & set(plan.query_index)
    counts = np.bincount(ways, minlength=51)[5:51]
    p = stats.chisquare(counts).pvalue
    ok = contract and p > 0.01 and min(ways) >= 5 and max(ways) <= 50
    record_criterion(11, "sampler conformance", ok,
                     f"way chi-square p={p:.3f} (> 0.01) over 10^4 episodes; contract "
                     f"{'holds' if contract else 'violated'}")
    assert ok
