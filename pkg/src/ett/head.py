"""Linear transform + nearest-centroid cosine head (LT+NCC)."""
from __future__ import annotations

import numpy as np

from .numerics import Tensor, as_tensor, cosine_matrix, log, log_softmax, matmul, softmax, tsum


class LinearTransform:
    """Bias-free d×d map applied row-wise, initialised to the identity."""

    def __init__(self, width):
        self.W = Tensor(np.eye(width), requires_grad=True)

    def num_params(self):
        return self.W.size

    def __call__(self, features):
        return transform(features, self.W)


def transform(features, W):
    return matmul(as_tensor(features), as_tensor(W).T)


def one_hot(labels, n_way):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_way))
    out[np.arange(labels.size), labels] = 1.0
    return out


def prototypes(features, labels, n_way=None):
    """Class means (N, d) of ``features``; differentiable through ``features``."""
    labels = np.asarray(labels, dtype=np.int64)
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    hot = one_hot(labels, n_way).T
    counts = hot.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts[:, 0] == 0).tolist()
        raise ValueError(f"classes without support samples: {empty}")
    return matmul(Tensor(hot / counts), as_tensor(features))


def logits(features, protos, temperature=1.0):
    """Cosine similarity of each row to each prototype, divided by ``temperature``."""
    feats = as_tensor(features)
    if feats.ndim == 1:
        feats = feats.reshape(1, -1)
    out = cosine_matrix(feats, protos)
    return out if temperature == 1.0 else out / temperature


def predict(features, protos, temperature=1.0):
    """Softmax over cosine similarities; a single vector gives an (N,) distribution."""
    single = as_tensor(features).ndim == 1
    probs = softmax(logits(features, protos, temperature), axis=-1)
    return probs[0] if single else probs


def ce_loss(probs, labels):
    """Mean of -log p(true class) over the batch, for given probabilities."""
    probs = as_tensor(probs)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if probs.ndim == 1:
        probs = probs.reshape(1, -1)
    picked = probs[np.arange(labels.size), labels]
    return -tsum(log(picked)) / float(labels.size)


def ce_from_logits(z, labels):
    """Cross-entropy through a stable log-softmax, averaged over rows."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(z, axis=-1)
    return -tsum(logp[np.arange(labels.size), labels]) / float(labels.size)
