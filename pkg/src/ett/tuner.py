"""Test-time tuning of a frozen ViT on one support set, as an sklearn estimator."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import apt, head, protoreg
from .backbone import Backbone
from .dra import VARIANTS as ADAPTER_VARIANTS
from .dra import DomainResidualAdapter
from .numerics import NonFiniteError, Tensor, no_grad
from .optim import AdamW
from .validation import check_images, check_support

PIPELINES = ("proto", "ltncc", "last", "first", "ln", "full", "apt", "adapter", "ett")
_PREFIX_PIPELINES = ("apt", "ett")
_ADAPTER_PIPELINES = ("adapter", "ett")
_BACKBONE_PIPELINES = ("last", "first", "ln", "full")


class EpisodeDiverged(FloatingPointError):
    """Raised when the tuning loss stops being finite."""


@dataclass(frozen=True)
class VariantSpec:
    pipeline: str = "ett"
    init: str = "attentive"
    adapter: str = "offset"
    use_pr: bool = True
    use_stand: bool = True

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}; expected one of {PIPELINES}")
        if self.init not in apt.INIT_STRATEGIES:
            raise ValueError(f"unknown init {self.init!r}")
        if self.adapter not in ADAPTER_VARIANTS:
            raise ValueError(f"unknown adapter {self.adapter!r}")

    @property
    def uses_prefix(self):
        return self.pipeline in _PREFIX_PIPELINES

    @property
    def uses_adapter(self):
        return self.pipeline in _ADAPTER_PIPELINES

    @property
    def name(self):
        parts = [self.pipeline]
        if self.uses_prefix and self.init != "attentive":
            parts.append(f"init={self.init}")
        if self.uses_adapter and self.adapter != "offset":
            parts.append(f"adapter={self.adapter}")
        if self.uses_prefix and not self.use_pr:
            parts.append("no-pr")
        if self.uses_prefix and not self.use_stand:
            parts.append("no-stand")
        return ",".join(parts)

    def to_dict(self):
        return asdict(self)


def backbone_subset(pipeline, config):
    """Backbone tensor names unfrozen by the layer/LN/full fine-tuning baselines."""
    from .backbone import param_names

    names = param_names(config)
    if pipeline == "last":
        return [n for n in names if n.startswith(f"blocks.{config.layers - 1}.")]
    if pipeline == "first":
        return [n for n in names if n.startswith("blocks.0.")]
    if pipeline == "ln":
        return [n for n in names if n.endswith((".gain", "ln1.bias", "ln2.bias", "norm.bias"))]
    if pipeline == "full":
        return list(names)
    return []


def ett_param_formula(n_way, width, hidden, d_proj, layers):
    """(N + d' + d_proj + d) d + 2 (d' + 1) L d."""
    return (n_way + hidden + d_proj + width) * width + 2 * (hidden + 1) * layers * width


class TuningState:
    """Everything trained for one episode, plus the EMA centre."""

    def __init__(self, backbone, phi, prefix=None, g=None, dra=None, psi=None,
                 center=None, teacher_protos=None, tuned_names=()):
        self.backbone = backbone
        self.phi = phi
        self.prefix = prefix
        self.g = g
        self.dra = dra
        self.psi = psi
        self.center = center
        self.teacher_protos = teacher_protos
        self.tuned_names = tuple(tuned_names)

    def trainable(self):
        params = {}
        if self.prefix is not None:
            params["prefix"] = self.prefix.theta
            params.update(self.g.params())
        if self.dra is not None:
            params.update(self.dra.named_params())
        params["phi.W"] = self.phi.W
        if self.psi is not None:
            params["psi.W"] = self.psi.W
        for name in self.tuned_names:
            params[f"backbone.{name}"] = self.backbone.params[name]
        return params

    def injection(self):
        if self.prefix is None:
            return None
        return apt.expand_prefix(self.prefix, self.g)


def count_trainable(state, config=None):
    """Number of scalars updated during tuning (backbone excluded unless unfrozen)."""
    return int(sum(p.size for p in state.trainable().values()))


class EpisodeTuner(ClassifierMixin, BaseEstimator):
    """Fit on an episode's support set, then classify queries by cosine to prototypes.

    Parameters mirror the ablation axes (``pipeline``, ``init``, ``adapter``,
    ``use_pr``, ``use_stand``) and the tuning hyper-parameters.  ``backbone``
    is never modified; baselines that tune backbone tensors work on private
    copies of those tensors.
    """

    def __init__(self, backbone=None, pipeline="ett", init="attentive", adapter="offset",
                 use_pr=True, use_stand=True, steps=40, lr=5e-4, weight_decay=0.01,
                 betas=(0.9, 0.999), lam=0.1, tau=0.04, tau_s=0.1, d_hidden=None,
                 d_proj=192, ema_momentum=0.9, temperature=1.0, random_state=0):
        self.backbone = backbone
        self.pipeline = pipeline
        self.init = init
        self.adapter = adapter
        self.use_pr = use_pr
        self.use_stand = use_stand
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.lam = lam
        self.tau = tau
        self.tau_s = tau_s
        self.d_hidden = d_hidden
        self.d_proj = d_proj
        self.ema_momentum = ema_momentum
        self.temperature = temperature
        self.random_state = random_state

    # -- setup -------------------------------------------------------------
    def _variant(self):
        return VariantSpec(self.pipeline, self.init, self.adapter, self.use_pr, self.use_stand)

    def _check_params(self):
        if not isinstance(self.backbone, Backbone):
            raise TypeError("backbone must be a Backbone instance")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.tau <= 0 or self.tau_s <= 0 or self.temperature <= 0:
            raise ValueError("temperatures must be positive")
        return self._variant()

    def _build_state(self, spec, X, y, n_way, rng):
        base = self.backbone
        cfg = base.config
        bb = base
        tuned = backbone_subset(spec.pipeline, cfg)
        if tuned:
            params = dict(base.params)
            for name in tuned:
                params[name] = Tensor(base.params[name].data.copy(), requires_grad=True)
            bb = Backbone(cfg, params)
        state = TuningState(bb, head.LinearTransform(cfg.width), tuned_names=tuned)
        if spec.uses_prefix:
            protos = apt.attentive_prototype(X, y, base, n_way)
            state.teacher_protos = protos
            state.prefix = apt.init_prefix_strategy(spec.init, X, y, base, n_way, rng,
                                                    attentive=protos)
            hidden = self.d_hidden if self.d_hidden is not None else cfg.width // 2
            state.g = apt.BottleneckG(cfg.width, cfg.layers, hidden, rng=rng)
            state.psi = protoreg.Projector(cfg.width, self.d_proj, rng=rng)
            state.center = protoreg.EmaCenter(self.ema_momentum)
        if spec.uses_adapter:
            state.dra = DomainResidualAdapter(cfg.layers, cfg.width, spec.adapter, rng=rng)
        return state

    # -- forward pieces ------------------------------------------------------
    def _features(self, state, X, inject=True):
        injection = state.injection() if inject else None
        return state.backbone.forward(X, injection=injection, adapter=state.dra).features

    def _features_nograd(self, state, X, inject=True, batch_size=256):
        out = []
        with no_grad():
            for i in range(0, len(X), batch_size):
                out.append(self._features(state, X[i:i + batch_size], inject).data)
        return np.concatenate(out, axis=0)

    def loss_terms(self, state, X, y, n_way, features=None, teacher=None):
        """Objective on the support set for the current state.

        Returns ``(total, ce, dist, projected_protos)``; ``dist`` is ``None``
        without a prefix.  ``teacher`` overrides the centred teacher (used by
        gradient checks to hold the stop-gradient branch fixed).
        """
        feats = self._features(state, X) if features is None else features
        xh = state.phi(feats)
        protos = head.prototypes(xh, y, n_way)
        ce = head.ce_from_logits(head.logits(xh, protos, self.temperature), y)
        if state.prefix is None:
            return ce, ce, None, None
        proj = state.teacher_protos @ state.psi.W.data
        if teacher is None:
            if state.center.value is None:
                state.center.update(proj)
            teacher = protoreg.teacher_distribution(
                state.teacher_protos, state.psi.W, state.center.value, self.tau,
                standardize=self.use_stand, tau_s=self.tau_s)
        student = protoreg.student_log_distribution(state.prefix.theta, state.psi.W, self.tau_s)
        dist = protoreg.distill_loss(teacher, student, log_student=True)
        lam = self.lam if self.use_pr else 0.0
        return protoreg.total_loss(ce, dist, lam), ce, dist, proj

    # -- estimator API -------------------------------------------------------
    def fit(self, X, y):
        spec = self._check_params()
        X = check_images(X, self.backbone.config)
        y, classes = check_support(y, len(X))
        self.classes_ = classes
        n_way = len(classes)
        rng = np.random.default_rng(self.random_state)
        state = self._build_state(spec, X, y, n_way, rng)

        cached = None
        if not spec.uses_prefix and not spec.uses_adapter and not state.tuned_names:
            # only phi trains: backbone features are constants
            cached = Tensor(state.backbone.features(X))
        steps = 0 if spec.pipeline == "proto" else self.steps
        params = state.trainable()
        opt = AdamW(params, lr=self.lr, betas=self.betas, weight_decay=self.weight_decay)
        trace = []
        for step in range(steps):
            try:
                total, ce, dist, proj = self.loss_terms(state, X, y, n_way, features=cached)
            except NonFiniteError as exc:
                raise EpisodeDiverged(f"non-finite loss at step {step}: {exc}") from exc
            value = total.item()
            if not np.isfinite(value):
                raise EpisodeDiverged(f"non-finite loss {value} at step {step}")
            trace.append(value)
            opt.zero_grad()
            total.backward()
            opt.step()
            if proj is not None:
                state.center.update(proj)
        opt.zero_grad()

        self.state_ = state
        self.n_way_ = n_way
        self.loss_trace_ = trace
        self.n_trainable_ = 0 if spec.pipeline == "proto" else count_trainable(state)
        support = cached.data if cached is not None else self._features_nograd(state, X)
        with no_grad():
            support = state.phi(Tensor(support)).data
        self.support_embeddings_ = support
        self.prototypes_ = apt.class_means(support, y, n_way)
        self._support = (X, y)
        self.support_accuracy_ = float(np.mean(self._decide(support).argmax(axis=1) == y))
        return self

    def _decide(self, embeddings, protos=None):
        protos = self.prototypes_ if protos is None else protos
        with no_grad():
            return head.logits(Tensor(embeddings), Tensor(protos), self.temperature).data

    def transform(self, X, use_prefix=True):
        """Adapted embeddings phi(f(x)) under the tuned state."""
        check_is_fitted(self, "prototypes_")
        X = check_images(X, self.backbone.config)
        feats = self._features_nograd(self.state_, X, inject=use_prefix)
        with no_grad():
            return self.state_.phi(Tensor(feats)).data

    def decision_function(self, X, use_prefix=True):
        """Cosine logits (n, N) against the tuned support prototypes.

        With ``use_prefix=False`` the prefix is left out of both the query
        and the support pass, so prototypes are recomputed without it.
        """
        protos = None
        if not use_prefix and self.state_.prefix is not None:
            Xs, ys = self._support
            protos = apt.class_means(self.transform(Xs, use_prefix=False), ys, self.n_way_)
        return self._decide(self.transform(X, use_prefix=use_prefix), protos)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
