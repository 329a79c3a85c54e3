"""Run configuration: one YAML document, validated before anything runs.

Precedence is command-line flag > file value > default.  Unknown keys are
errors at every level.  A complete document::

    seed: 0
    episodes: 100
    workers: 1
    out: runs/eval
    checkpoint: runs/pretrain/backbone.ett
    data:
      seed: 0
      base_classes: 64
      novel_classes: 10
      domain_shift: 0.0
      images_per_class: 40
      max_shot: 10
      queries: 10
    backbone: {image_size: 32, patch_size: 8, layers: 4, heads: 4, width: 64, ffn_hidden: 256}
    variant: {pipeline: ett, init: attentive, adapter: offset, use_pr: true, use_stand: true}
    hparams: {steps: 40, lr: 5.0e-4, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, lam: 0.1,
              tau: 0.04, tau_s: 0.1, d_hidden: null, d_proj: 192, ema_momentum: 0.9,
              temperature: 1.0}
    pretrain: {epochs: 20, batch_size: 64, lr: 1.0e-3, weight_decay: 0.05}
    ablate: {pipeline: [proto, ltncc, ett]}
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field

import yaml

from .backbone import ViTConfig
from .engine import Hparams
from .tuner import PIPELINES, VariantSpec


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0  # generator seed: fixes the synthetic dataset, not the episodes
    base_classes: int = 64
    novel_classes: int = 10
    domain_shift: float = 0.0
    images_per_class: int = 40
    max_shot: int = 10
    queries: int = 10


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    episodes: int = 100
    workers: int = 1
    out: str | None = None
    checkpoint: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    backbone: ViTConfig = field(default_factory=ViTConfig)
    variant: VariantSpec = field(default_factory=VariantSpec)
    hparams: Hparams = field(default_factory=Hparams)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    ablate: dict = field(default_factory=lambda: {"pipeline": ["proto", "ltncc", "ett"]})

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError("episodes must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if not 0.0 <= self.data.domain_shift <= 1.0:
            raise ConfigError("data.domain_shift must lie in [0, 1]")
        if self.data.novel_classes < 5:
            raise ConfigError("data.novel_classes must be at least 5")
        if self.data.max_shot + self.data.queries > self.data.images_per_class:
            raise ConfigError("data.images_per_class must cover max_shot + queries")
        if self.hparams.steps < 0 or self.hparams.lr <= 0:
            raise ConfigError("hparams.steps must be >= 0 and hparams.lr > 0")
        axes = {f.name for f in dataclasses.fields(VariantSpec)}
        for key, values in self.ablate.items():
            if key not in axes:
                raise ConfigError(f"ablate axis {key!r} is not a variant field {sorted(axes)}")
            if not isinstance(values, list) or not values:
                raise ConfigError(f"ablate axis {key!r} needs a non-empty list")

    def to_dict(self):
        return asdict(self)

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _coerce(value, kind, where):
    """Check one scalar against a dataclass annotation, tolerating YAML's 5e-4 strings."""
    args = typing.get_args(kind)
    if type(None) in args:
        if value is None:
            return None
        kind = next(a for a in args if a is not type(None))
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, mapping, where):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(mapping).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(mapping) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in mapping.items():
        kind = hints[key]
        sub = f"{where}.{key}" if where else key
        if dataclasses.is_dataclass(kind):
            kwargs[key] = _build(kind, value, sub)
        elif kind is dict or typing.get_origin(kind) is dict:
            if not isinstance(value, dict):
                raise ConfigError(f"{sub}: expected a mapping")
            kwargs[key] = value
        else:
            kwargs[key] = _coerce(value, kind, sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _hparams(mapping):
    mapping = dict(mapping or {})
    if "betas" in mapping:
        b = mapping.pop("betas")
        if not isinstance(b, (list, tuple)) or len(b) != 2:
            raise ConfigError("hparams.betas must be a two-element list")
        mapping["beta1"], mapping["beta2"] = b
    return mapping


def load_mapping(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    return data


def from_mapping(mapping):
    mapping = dict(mapping)
    if "hparams" in mapping:
        mapping["hparams"] = _hparams(mapping["hparams"])
    return _build(RunConfig, mapping, "")


def merge(mapping, overrides):
    """Apply dotted-key overrides (``data.domain_shift``) onto a nested mapping."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in mapping.items()}
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = out
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return out


def parse_variant(text):
    """Inverse of ``VariantSpec.name``: ``ett,init=avg,adapter=film,no-pr``."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts or parts[0] not in PIPELINES:
        raise ConfigError(f"unknown variant {text!r}; pipelines are {PIPELINES}")
    kw = {"pipeline": parts[0]}
    for p in parts[1:]:
        if p == "no-pr":
            kw["use_pr"] = False
        elif p == "no-stand":
            kw["use_stand"] = False
        elif "=" in p and p.split("=", 1)[0] in ("init", "adapter"):
            k, v = p.split("=", 1)
            kw[k] = v
        else:
            raise ConfigError(f"cannot parse variant component {p!r}")
    try:
        return VariantSpec(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
