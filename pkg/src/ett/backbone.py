"""Minimal pre-norm Vision Transformer with prefix and adapter hooks."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .numerics import (
    Tensor,
    broadcast_to,
    concat,
    gelu,
    layer_norm,
    matmul,
    no_grad,
    softmax,
)


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    layers: int = 4
    heads: int = 4
    width: int = 64
    ffn_hidden: int | None = None
    channels: int = 3

    def __post_init__(self):
        for key in ("image_size", "patch_size", "layers", "heads", "width", "channels"):
            if int(getattr(self, key)) <= 0:
                raise ValueError(f"{key} must be positive")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 4 * self.width)

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_patches(self):
        return self.grid ** 2

    @property
    def patch_dim(self):
        return self.channels * self.patch_size ** 2

    @property
    def head_dim(self):
        return self.width // self.heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def desk(cls):
        return cls()

    @classmethod
    def micro(cls):
        # L=2, d=8, h=2, 2x2 patch grid
        return cls(image_size=8, patch_size=4, layers=2, heads=2, width=8)

    @classmethod
    def vit_small(cls):
        return cls(image_size=224, patch_size=16, layers=12, heads=6, width=384)

    @classmethod
    def vit_tiny(cls):
        # 84px inputs do not tile with patch 8; the nearest tiling size is used
        return cls(image_size=80, patch_size=8, layers=12, heads=3, width=192)


def count_backbone_params(config):
    """Closed-form parameter count of :class:`Backbone` for ``config``."""
    d, f, L = config.width, config.ffn_hidden, config.layers
    embed = config.patch_dim * d + d + (config.n_patches + 1) * d + d
    per_layer = 4 * (d * d + d) + 4 * d + (d * f + f) + (f * d + d)
    return embed + L * per_layer + 2 * d


def param_names(config):
    names = ["cls_token", "pos_embed", "patch_embed.weight", "patch_embed.bias",
             "norm.gain", "norm.bias"]
    for l in range(config.layers):
        p = f"blocks.{l}."
        names += [p + s for s in (
            "ln1.gain", "ln1.bias",
            "attn.wq.weight", "attn.wq.bias", "attn.wk.weight", "attn.wk.bias",
            "attn.wv.weight", "attn.wv.bias", "attn.wo.weight", "attn.wo.bias",
            "ln2.gain", "ln2.bias",
            "ffn.fc1.weight", "ffn.fc1.bias", "ffn.fc2.weight", "ffn.fc2.bias",
        )]
    return sorted(names)


def patchify(images, config):
    """(B, C, H, W) images -> (B, P², C·p·p) patch vectors, row-major over the grid."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    c, s, p = config.channels, config.image_size, config.patch_size
    if images.shape[1:] != (c, s, s):
        raise ValueError(f"expected images of shape (B, {c}, {s}, {s}), got {images.shape}")
    b, g = images.shape[0], config.grid
    x = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, c * p * p)


@dataclass
class ForwardTrace:
    features: Tensor                      # (B, d) final class-token feature
    patch_tokens: Tensor                  # (B, P², d) position-added patch embeddings
    cls_scores: np.ndarray                # (B, h, P²) last-layer pre-softmax class->patch scores
    attentions: list = field(default_factory=list)  # per layer (B, h, T, T + N_P)
    injected: bool = False


class Backbone:
    """Frozen-by-default ViT. Parameters live in ``self.params`` (name -> Tensor)."""

    def __init__(self, config=None, params=None, seed=0):
        self.config = config or ViTConfig()
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        missing = set(param_names(self.config)) ^ set(params)
        if missing:
            raise ValueError(f"parameter set mismatch: {sorted(missing)}")
        self.params = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
        self._check_shapes()

    def _shapes(self):
        c = self.config
        d, f = c.width, c.ffn_hidden
        shapes = {
            "cls_token": (1, d), "pos_embed": (c.n_patches + 1, d),
            "patch_embed.weight": (c.patch_dim, d), "patch_embed.bias": (d,),
            "norm.gain": (d,), "norm.bias": (d,),
        }
        for l in range(c.layers):
            p = f"blocks.{l}."
            for n in ("wq", "wk", "wv", "wo"):
                shapes[p + f"attn.{n}.weight"] = (d, d)
                shapes[p + f"attn.{n}.bias"] = (d,)
            for n in ("ln1", "ln2"):
                shapes[p + n + ".gain"] = (d,)
                shapes[p + n + ".bias"] = (d,)
            shapes[p + "ffn.fc1.weight"] = (d, f)
            shapes[p + "ffn.fc1.bias"] = (f,)
            shapes[p + "ffn.fc2.weight"] = (f, d)
            shapes[p + "ffn.fc2.bias"] = (d,)
        return shapes

    def _init_params(self, rng):
        params = {}
        for name, shape in self._shapes().items():
            if name.endswith(".gain"):
                arr = np.ones(shape)
            elif name.endswith(".bias"):
                arr = np.zeros(shape)
            else:
                arr = 0.02 * rng.standard_normal(shape)
            params[name] = arr
        return params

    def _check_shapes(self):
        for name, shape in self._shapes().items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: expected {shape}, got {self.params[name].shape}")

    # -- parameter management -------------------------------------------
    def num_params(self):
        return sum(p.size for p in self.params.values())

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        for k, v in state.items():
            self.params[k].data[...] = v

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def astype(self, dtype):
        """Copy of this backbone with parameters stored as ``dtype``."""
        return Backbone(self.config, {k: Tensor(v.data, dtype=dtype) for k, v in self.params.items()})

    def round_to_float32(self):
        """Quantise weights to float32 so an in-memory model equals its checkpoint."""
        for p in self.params.values():
            p.data[...] = p.data.astype(np.float32)

    def save(self, path):
        tensors = {k: v.data for k, v in self.params.items()}
        tensors.update(_config_tensors(self.config))
        checkpoint.save(path, tensors)

    @classmethod
    def load(cls, path):
        tensors = checkpoint.load(path)
        config = _config_from_tensors(tensors)
        params = {k: v.astype(np.float64) for k, v in tensors.items()
                  if not k.startswith("config.")}
        return cls(config, params)

    # -- forward ---------------------------------------------------------
    def patch_embed(self, images):
        """Position-added patch embeddings, (B, P², d); class slot excluded."""
        p = self.params
        patches = patchify(images, self.config).astype(p["pos_embed"].data.dtype, copy=False)
        return matmul(Tensor(patches, dtype=patches.dtype), p["patch_embed.weight"]) + p["patch_embed.bias"] \
            + p["pos_embed"][1:]

    def forward(self, images, injection=None, offsets=None, adapter=None, record=False):
        """Run the network on a batch.

        ``injection`` is a list of ``(theta_k, theta_v)`` pairs, one per layer,
        each (N_P, d); they extend that layer's key and value sequences.
        ``offsets`` is ``(delta_a, delta_f)``, each (L, d), added to the MSA and
        FFN branch outputs before the residual sum.  ``adapter`` is any object
        with ``apply(features, which, layer)`` and generalises ``offsets``.
        """
        c, p = self.config, self.params
        L, h, dh = c.layers, c.heads, c.head_dim
        if injection is not None:
            if len(injection) != L:
                raise ValueError(f"injection must supply {L} layer pairs")
            for tk, tv in injection:
                if tk.ndim != 2 or tk.shape[1] != c.width or tk.shape != tv.shape:
                    raise ValueError("each injected key/value must be (N_P, d)")
        if offsets is not None:
            if adapter is not None:
                raise ValueError("pass either offsets or adapter, not both")
            da, df = offsets
            if tuple(da.shape) != (L, c.width) or tuple(df.shape) != (L, c.width):
                raise ValueError(f"offsets must each be ({L}, {c.width})")
            adapter = _OffsetPair(da, df)

        tokens = self.patch_embed(images)
        b = tokens.shape[0]
        cls = broadcast_to(p["cls_token"] + p["pos_embed"][0:1], (b, 1, c.width))
        x = concat([cls, tokens], axis=1)
        t = x.shape[1]
        attentions = []
        scores = None
        for l in range(L):
            pre = f"blocks.{l}."
            y = layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            q = self._heads(matmul(y, p[pre + "attn.wq.weight"]) + p[pre + "attn.wq.bias"], b, t)
            k = self._heads(matmul(y, p[pre + "attn.wk.weight"]) + p[pre + "attn.wk.bias"], b, t)
            v = self._heads(matmul(y, p[pre + "attn.wv.weight"]) + p[pre + "attn.wv.bias"], b, t)
            if injection is not None and injection[l][0].shape[0] > 0:
                tk, tv = injection[l]
                n_p = tk.shape[0]
                pk = broadcast_to(tk.reshape(1, n_p, h, dh).transpose(0, 2, 1, 3), (b, h, n_p, dh))
                pv = broadcast_to(tv.reshape(1, n_p, h, dh).transpose(0, 2, 1, 3), (b, h, n_p, dh))
                k = concat([k, pk], axis=2)
                v = concat([v, pv], axis=2)
            scores = matmul(q, k.transpose(0, 1, 3, 2)) / math.sqrt(dh)
            attn = softmax(scores, axis=-1)
            if record:
                attentions.append(attn.data)
            out = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, c.width)
            out = matmul(out, p[pre + "attn.wo.weight"]) + p[pre + "attn.wo.bias"]
            if adapter is not None:
                out = adapter.apply(out, "msa", l)
            x = x + out
            y = layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            f = gelu(matmul(y, p[pre + "ffn.fc1.weight"]) + p[pre + "ffn.fc1.bias"])
            f = matmul(f, p[pre + "ffn.fc2.weight"]) + p[pre + "ffn.fc2.bias"]
            if adapter is not None:
                f = adapter.apply(f, "ffn", l)
            x = x + f
        feats = layer_norm(x[:, 0, :], p["norm.gain"], p["norm.bias"])
        return ForwardTrace(
            features=feats,
            patch_tokens=tokens,
            cls_scores=scores.data[:, :, 0, 1:1 + c.n_patches].copy(),
            attentions=attentions,
            injected=injection is not None,
        )

    def _heads(self, x, b, t):
        c = self.config
        return x.reshape(b, t, c.heads, c.head_dim).transpose(0, 2, 1, 3)

    def features(self, images, batch_size=256, **kwargs):
        """Final class-token features as a numpy array, without building a graph."""
        images = np.asarray(images)
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i:i + batch_size], **kwargs).features.data)
        return np.concatenate(out, axis=0)


class _OffsetPair:
    def __init__(self, delta_a, delta_f):
        self.delta_a, self.delta_f = delta_a, delta_f

    def apply(self, features, which, layer):
        delta = self.delta_a if which == "msa" else self.delta_f
        return features + delta[layer]


def extract_cls_attention(trace):
    """Pre-softmax class-token->patch scores of the last MSA layer, (B, h, P²)."""
    if trace.injected:
        raise ValueError("class attention must come from a pass without prefix injection")
    return trace.cls_scores


def _config_tensors(config):
    d = config.to_dict()
    return {f"config.{k}": np.array([float(v)]) for k, v in d.items()}


def _config_from_tensors(tensors):
    fields = {k[len("config."):]: int(v[0]) for k, v in tensors.items() if k.startswith("config.")}
    if not fields:
        raise checkpoint.CheckpointError("checkpoint carries no config entries")
    return ViTConfig(**fields)
