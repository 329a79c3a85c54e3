"""Attentive prefix tuning: prefix matrix, shared bottleneck, prototype init."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, gelu, matmul, no_grad

INIT_STRATEGIES = ("random", "avg", "sampling", "attentive")


@dataclass
class Prefix:
    theta: Tensor  # (N_P, d)

    @property
    def n_prefix(self):
        return self.theta.shape[0]


class BottleneckG:
    """Bias-free two-layer map shared by every layer: (N_P, d) -> L key/value pairs."""

    def __init__(self, width, layers, hidden=None, rng=None, activation="gelu", std=0.02):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.width, self.layers = width, layers
        self.hidden = hidden if hidden is not None else width // 2
        if activation not in ("gelu", None):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.W1 = Tensor(std * rng.standard_normal((width, self.hidden)), requires_grad=True)
        self.W2 = Tensor(std * rng.standard_normal((self.hidden, 2 * layers * width)),
                         requires_grad=True)

    def num_params(self):
        return self.W1.size + self.W2.size

    def params(self):
        return {"g.W1": self.W1, "g.W2": self.W2}


def expand_prefix(prefix, g):
    """Per-layer ``(theta_k, theta_v)`` pairs, each (N_P, d); layer-major, key first."""
    theta = prefix.theta if isinstance(prefix, Prefix) else prefix
    n, d, L = theta.shape[0], g.width, g.layers
    if theta.shape[1] != d:
        raise ValueError(f"prefix width {theta.shape[1]} does not match g width {d}")
    hidden = matmul(theta, g.W1)
    if g.activation == "gelu":
        hidden = gelu(hidden)
    flat = matmul(hidden, g.W2).reshape(n, L, 2, d)
    return [(flat[:, l, 0, :], flat[:, l, 1, :]) for l in range(L)]


def class_means(x, labels, n_way=None):
    """Row-wise class means of a numpy array, rows ordered by class index."""
    labels = np.asarray(labels)
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    out = np.empty((n_way, x.shape[1]), dtype=x.dtype)
    for c in range(n_way):
        mask = labels == c
        if not mask.any():
            raise ValueError(f"class {c} has no support samples")
        out[c] = x[mask].mean(axis=0)
    return out


def attentive_embedding(patch_tokens, cls_scores):
    """Head-averaged, attention-weighted sum of patch embeddings.

    ``patch_tokens`` is (B, P², d), ``cls_scores`` the pre-softmax (B, h, P²)
    class-token scores.  Returns (B, d).
    """
    z = cls_scores - cls_scores.max(axis=-1, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=-1, keepdims=True)
    h = cls_scores.shape[1]
    return np.einsum("bhm,bmd->bd", w, patch_tokens) / h


def image_embeddings(images, backbone, mode="attentive", batch_size=256):
    """Per-image initial embeddings from a clean pass: attentive or plain patch mean."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            trace = backbone.forward(images[i:i + batch_size])
            tokens = trace.patch_tokens.data
            if mode == "attentive":
                out.append(attentive_embedding(tokens, trace.cls_scores))
            elif mode == "avg":
                out.append(tokens.mean(axis=1))
            else:
                raise ValueError(f"unknown embedding mode {mode!r}")
    return np.concatenate(out, axis=0)


def attentive_prototype(support_images, labels, backbone, n_way=None):
    """Class prototypes (N, d) of attention-pooled patch embeddings."""
    emb = image_embeddings(np.asarray(support_images), backbone, "attentive")
    return class_means(emb, labels, n_way)


def init_prefix(prototypes):
    return Prefix(Tensor(np.array(prototypes, copy=True), requires_grad=True))


def init_prefix_strategy(strategy, support_images, labels, backbone, n_way, rng,
                         attentive=None):
    """Prefix initialisation for the ablation strategies.

    ``random`` draws N(0, 0.02²); ``avg`` uses class means of plain patch
    averages; ``sampling`` takes one random support image per class;
    ``attentive`` uses attention-pooled prototypes (pass them via
    ``attentive`` to skip recomputation).
    """
    d = backbone.config.width
    if strategy == "random":
        return init_prefix(0.02 * rng.standard_normal((n_way, d)))
    if strategy == "attentive":
        if attentive is None:
            attentive = attentive_prototype(support_images, labels, backbone, n_way)
        return init_prefix(attentive)
    if strategy == "avg":
        emb = image_embeddings(np.asarray(support_images), backbone, "avg")
        return init_prefix(class_means(emb, labels, n_way))
    if strategy == "sampling":
        labels = np.asarray(labels)
        picks = [int(rng.choice(np.flatnonzero(labels == c))) for c in range(n_way)]
        emb = image_embeddings(np.asarray(support_images)[picks], backbone, "avg")
        return init_prefix(emb)
    raise ValueError(f"unknown init strategy {strategy!r}; expected one of {INIT_STRATEGIES}")
