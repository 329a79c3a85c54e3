"""Domain residual adapters and the ablation alternatives."""
from __future__ import annotations

import numpy as np

from .numerics import Tensor, gelu, matmul

VARIANTS = ("offset", "linear", "bottleneck", "film")


class DomainResidualAdapter:
    """Per-layer adapters on the MSA and FFN branch outputs.

    ``offset``: x + delta.  ``linear``: x + x W.  ``bottleneck``:
    x + gelu(x W1) W2.  ``film``: (1 + gamma) * x + delta.  Every variant
    starts as an exact identity.
    """

    def __init__(self, layers, width, variant="offset", rng=None, bottleneck_dim=None,
                 std=0.02):
        if variant not in VARIANTS:
            raise ValueError(f"unknown adapter variant {variant!r}; expected one of {VARIANTS}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers, self.width, self.variant = layers, width, variant
        L, d = layers, width
        zeros = lambda *shape: Tensor(np.zeros(shape), requires_grad=True)  # noqa: E731
        self.params = {}
        for which in ("a", "f"):
            if variant == "offset":
                self.params[f"delta_{which}"] = zeros(L, d)
            elif variant == "film":
                self.params[f"gamma_{which}"] = zeros(L, d)
                self.params[f"delta_{which}"] = zeros(L, d)
            elif variant == "linear":
                self.params[f"weight_{which}"] = zeros(L, d, d)
            else:
                r = bottleneck_dim or max(1, d // 4)
                self.params[f"down_{which}"] = Tensor(std * rng.standard_normal((L, d, r)),
                                                      requires_grad=True)
                self.params[f"up_{which}"] = zeros(L, r, d)

    @property
    def delta_a(self):
        return self.params["delta_a"]

    @property
    def delta_f(self):
        return self.params["delta_f"]

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def named_params(self):
        return {f"dra.{k}": v for k, v in self.params.items()}

    def apply(self, features, which, layer):
        if which not in ("msa", "ffn"):
            raise ValueError(f"which must be 'msa' or 'ffn', got {which!r}")
        if not 0 <= layer < self.layers:
            raise IndexError(f"layer {layer} out of range for {self.layers} layers")
        tag = "a" if which == "msa" else "f"
        p = self.params
        if self.variant == "offset":
            return features + p[f"delta_{tag}"][layer]
        if self.variant == "film":
            return features * (1.0 + p[f"gamma_{tag}"][layer]) + p[f"delta_{tag}"][layer]
        if self.variant == "linear":
            return features + matmul(features, p[f"weight_{tag}"][layer])
        hidden = gelu(matmul(features, p[f"down_{tag}"][layer]))
        return features + matmul(hidden, p[f"up_{tag}"][layer])


def apply(features, which, layer, state):
    return state.apply(features, which, layer)
