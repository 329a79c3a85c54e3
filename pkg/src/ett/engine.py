"""Toy pre-training, per-episode tuning, evaluation and the overfitting probe."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .backbone import Backbone, ViTConfig
from .episodes import DatasetSource, episode_rng, sample_episode
from .head import ce_from_logits
from .numerics import NonFiniteError, Tensor, matmul
from .optim import AdamW
from .tuner import EpisodeDiverged, EpisodeTuner, VariantSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hparams:
    steps: int = 40
    lr: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    lam: float = 0.1
    tau: float = 0.04
    tau_s: float = 0.1
    d_hidden: int | None = None
    d_proj: int = 192
    ema_momentum: float = 0.9
    temperature: float = 1.0

    def tuner_kwargs(self):
        kw = asdict(self)
        kw["betas"] = (kw.pop("beta1"), kw.pop("beta2"))
        return kw

    def replace(self, **changes):
        return Hparams(**{**asdict(self), **changes})


@dataclass
class EpisodeResult:
    episode_id: int
    way: int
    shots: list
    acc_support: float
    acc_query: float
    steps: int
    params_trainable: int
    loss_trace: list = field(default_factory=list)
    seed: int = 0
    wall_time: float = 0.0

    def record(self):
        """Line record for the results stream (timing goes to the log, not here)."""
        return {
            "episode_id": self.episode_id, "way": self.way, "shots": list(self.shots),
            "acc_support": self.acc_support, "acc_query": self.acc_query,
            "steps": self.steps, "params_trainable": self.params_trainable, "seed": self.seed,
        }


@dataclass
class Summary:
    variant: str
    mean_acc: float
    ci95: float
    episodes: int
    ci_defined: bool
    results: list = field(default_factory=list, repr=False)

    def record(self):
        return {"variant": self.variant, "mean_acc": self.mean_acc, "ci95": self.ci95,
                "episodes": self.episodes, "ci_defined": self.ci_defined}


# -- pre-training ---------------------------------------------------------
@dataclass
class PretrainReport:
    train_loss: list
    val_accuracy: float


def _base_split(source, val_fraction):
    n_val = max(1, int(round(source.images_per_class * val_fraction)))
    n_train = source.images_per_class - n_val
    train = [(k, i) for k in range(source.class_count) for i in range(n_train)]
    val = [(k, i) for k in range(source.class_count)
           for i in range(n_train, source.images_per_class)]
    return train, val


def pretrain_toy(base_source, config=None, epochs=8, rng=None, batch_size=64, lr=1e-3,
                 weight_decay=0.05, val_fraction=0.2, init_seed=0):
    """Supervised cross-entropy pre-training on the base split.

    A temporary linear head is trained with the backbone and discarded.
    Returns ``(backbone, report)``; weights are rounded to float32 so the
    in-memory model equals its saved checkpoint.
    """
    if base_source.split != "base":
        raise ValueError("pre-training must use the base split")
    config = config or ViTConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    model = Backbone(config, seed=init_seed)
    for p in model.params.values():
        p.requires_grad = True
    n_cls = base_source.class_count
    head_w = Tensor(np.zeros((config.width, n_cls)), requires_grad=True)
    head_b = Tensor(np.zeros(n_cls), requires_grad=True)
    params = {**model.params, "head.weight": head_w, "head.bias": head_b}
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)

    train, val = _base_split(base_source, val_fraction)
    labels = np.array([k for k, _ in train])
    images = base_source.images(*zip(*train))
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            feats = model.forward(images[idx]).features
            try:
                loss = ce_from_logits(matmul(feats, head_w) + head_b, labels[idx])
            except NonFiniteError as exc:
                raise EpisodeDiverged(f"pre-training diverged in epoch {epoch}: {exc}") from exc
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        log.info("pretrain epoch %d loss %.4f", epoch, np.mean(losses[-len(order) // batch_size:]))
    model.freeze()
    model.round_to_float32()

    val_labels = np.array([k for k, _ in val])
    feats = model.features(base_source.images(*zip(*val)))
    pred = (feats @ head_w.data + head_b.data).argmax(axis=1)
    return model, PretrainReport(losses, float(np.mean(pred == val_labels)))


# -- episodes ---------------------------------------------------------------
def make_tuner(backbone, variant, hparams, seed=0):
    return EpisodeTuner(backbone, pipeline=variant.pipeline, init=variant.init,
                        adapter=variant.adapter, use_pr=variant.use_pr,
                        use_stand=variant.use_stand, random_state=seed,
                        **hparams.tuner_kwargs())


def finetune_episode(backbone, episode, variant, hparams=None, episode_id=0, seed=0):
    """Tune on the support set, score the query set."""
    hparams = hparams or Hparams()
    t0 = time.perf_counter()
    tuner = make_tuner(backbone, variant, hparams, seed)
    tuner.fit(episode.support_images, episode.support_labels)
    acc_q = float(tuner.score(episode.query_images, episode.query_labels))
    return EpisodeResult(
        episode_id=episode_id, way=episode.way, shots=episode.shots,
        acc_support=tuner.support_accuracy_, acc_query=acc_q,
        steps=len(tuner.loss_trace_), params_trainable=tuner.n_trainable_,
        loss_trace=list(tuner.loss_trace_), seed=seed,
        wall_time=time.perf_counter() - t0,
    )


def _run_one(args):
    backbone, source, variant, hparams, seed, i, max_shot, M = args
    ep = sample_episode(source, episode_rng(seed, i), max_shot=max_shot, M=M)
    return finetune_episode(backbone, ep, variant, hparams, episode_id=i, seed=seed)


def summarize(variant_name, results):
    accs = np.array([r.acc_query for r in results])
    n = len(accs)
    if n < 2:
        ci, defined = 0.0, False
    else:
        ci, defined = float(1.96 * accs.std(ddof=1) / math.sqrt(n)), True
    return Summary(variant_name, float(accs.mean()), ci, n, defined, list(results))


def evaluate(backbone, source, variant, episode_count, seed=0, hparams=None, max_shot=10,
             M=10, workers=1, on_result=None):
    """Mean query accuracy with a 95% interval over ``episode_count`` episodes.

    Episode ``i`` always uses the generator stream ``(seed, i)``, so variants
    evaluated with the same seed see identical episodes.  Results reach
    ``on_result`` in episode order regardless of ``workers``.
    """
    if episode_count < 1:
        raise ValueError("episode_count must be at least 1")
    hparams = hparams or Hparams()
    jobs = [(backbone, source, variant, hparams, seed, i, max_shot, M)
            for i in range(episode_count)]
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            stream = pool.map(_run_one, jobs)
            for r in stream:
                results.append(r)
                if on_result:
                    on_result(r)
    else:
        for job in jobs:
            r = _run_one(job)
            results.append(r)
            if on_result:
                on_result(r)
    return summarize(variant.name, results)


# -- overfitting probe --------------------------------------------------------
@dataclass
class ProbeReport:
    episode_ids: list
    min_shots: list
    full: list
    ett: list

    def means(self):
        f = lambda rs, key: float(np.mean([getattr(r, key) for r in rs]))  # noqa: E731
        return {
            "full_support": f(self.full, "acc_support"), "full_query": f(self.full, "acc_query"),
            "ett_support": f(self.ett, "acc_support"), "ett_query": f(self.ett, "acc_query"),
        }


def overfit_probe(backbone, source, seed=0, episodes=20, max_min_shot=2, max_shot=10, M=10,
                  hparams=None, full_hparams=None, max_draws=10_000):
    """Compare full fine-tuning with eTT on low-shot episodes (min shot <= 2)."""
    hparams = hparams or Hparams()
    full_hparams = full_hparams or hparams
    ids, shots, full, ett = [], [], [], []
    for i in range(max_draws):
        if len(ids) == episodes:
            break
        ep = sample_episode(source, episode_rng(seed, i), max_shot=max_shot, M=M)
        if ep.min_shot > max_min_shot:
            continue
        ids.append(i)
        shots.append(ep.min_shot)
        full.append(finetune_episode(backbone, ep, VariantSpec("full"), full_hparams, i, seed))
        ett.append(finetune_episode(backbone, ep, VariantSpec("ett"), hparams, i, seed))
    return ProbeReport(ids, shots, full, ett)


def hparams_from_mapping(mapping):
    known = {f.name for f in fields(Hparams)}
    unknown = set(mapping) - known
    if unknown:
        raise ValueError(f"unknown hyper-parameters: {sorted(unknown)}")
    return Hparams(**mapping)


# -- verification helpers ---------------------------------------------------------
def episode_gradcheck(config=None, n_way=3, shots=2, seed=0, h=1e-5, tol=1e-4, d_proj=16):
    """Finite-difference check of the full eTT episode loss on a small config.

    Every trainable tensor is moved off its initial value first (the prefix
    K/V are scaled up so attention to them is non-trivial), and the teacher
    branch is held at its value for the starting point, as it carries no
    gradient.
    """
    from .numerics import grad_check
    from .protoreg import teacher_distribution

    config = config or ViTConfig.micro()
    rng = np.random.default_rng(seed)
    model = Backbone(config, seed=seed)
    for p in model.params.values():
        p.data += 0.3 * rng.standard_normal(p.shape)
    source = DatasetSource(n_way, split="novel", seed=seed, image_size=config.image_size,
                           images_per_class=shots)
    labels = np.repeat(np.arange(n_way), shots)
    X = source.images(labels, np.tile(np.arange(shots), n_way))
    tuner = EpisodeTuner(model, pipeline="ett", d_proj=d_proj, random_state=seed)
    state = tuner._build_state(tuner._check_params(), X, labels, n_way, rng)
    for p in state.trainable().values():
        p.data += 0.05 * rng.standard_normal(p.shape)
    state.g.W1.data *= 10.0
    state.g.W2.data *= 10.0
    tuner.loss_terms(state, X, labels, n_way)  # initialises the centre
    teacher = teacher_distribution(state.teacher_protos, state.psi.W, state.center.value,
                                   tuner.tau, standardize=tuner.use_stand, tau_s=tuner.tau_s)
    return grad_check(lambda: tuner.loss_terms(state, X, labels, n_way, teacher=teacher)[0],
                      state.trainable(), h=h, tol=tol)


def sign_test(a, b):
    """One-sided paired sign test that ``b`` beats ``a``; ties are dropped.

    Returns ``(wins, losses, p_value)``.
    """
    from scipy.stats import binomtest

    d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    wins, losses = int(np.sum(d > 0)), int(np.sum(d < 0))
    if wins + losses == 0:
        return wins, losses, 1.0
    return wins, losses, float(binomtest(wins, wins + losses, alternative="greater").pvalue)
