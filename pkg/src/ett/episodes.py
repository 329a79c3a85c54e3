"""Procedural image source and variable-way, variable-shot episode sampling."""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

IMAGE_SIZE = 32
CHANNELS = 3
MIN_WAY = 5
MAX_WAY = 50
NOVEL_OFFSET = 100_000  # base and novel class ids never overlap

# domain-shift strengths at shift 1.0
SHIFT_STRIPES = 0.35
SHIFT_CAST = 0.5
SHIFT_NUISANCE = 0.3
SHIFT_HUE = 1.0  # fraction of a half-turn of chroma about the gray axis

_GRAY = np.ones(3) / np.sqrt(3.0)


@dataclass(frozen=True)
class DatasetSource:
    class_count: int
    split: str = "novel"
    domain_shift: float = 0.0
    seed: int = 0
    images_per_class: int = 40
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        if self.split not in ("base", "novel"):
            raise ValueError("split must be 'base' or 'novel'")
        if not 0.0 <= self.domain_shift <= 1.0:
            raise ValueError("domain_shift must lie in [0, 1]")
        if self.class_count < 1 or self.images_per_class < 1:
            raise ValueError("class_count and images_per_class must be positive")

    def class_id(self, k):
        return int(k) + (NOVEL_OFFSET if self.split == "novel" else 0)

    def image(self, k, index):
        return generate_image(self.class_id(k), int(index), self.domain_shift, self.seed,
                              self.image_size)

    def images(self, ks, indices):
        return np.stack([self.image(k, i) for k, i in zip(ks, indices)])


@dataclass
class Episode:
    way: int
    classes: np.ndarray          # source-local class index per canonical label
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    support_index: list = field(default_factory=list)  # (class, image index) pairs
    query_index: list = field(default_factory=list)

    @property
    def shots(self):
        return np.bincount(self.support_labels, minlength=self.way).tolist()

    @property
    def min_shot(self):
        return min(self.shots)


def _unit(v):
    return v / np.linalg.norm(v)


def _rotation_about_gray(angle):
    """3x3 rotation by ``angle`` about the gray axis (Rodrigues)."""
    k = np.array([[0.0, -_GRAY[2], _GRAY[1]],
                  [_GRAY[2], 0.0, -_GRAY[0]],
                  [-_GRAY[1], _GRAY[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


@functools.lru_cache(maxsize=8192)
def _render(class_id, index, domain_shift, seed, size):
    crng = np.random.default_rng([seed, 7, class_id])
    irng = np.random.default_rng([seed, 11, class_id, index])
    drng = np.random.default_rng([seed, 13])
    yy, xx = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing="ij")

    # class texture: two oriented sinusoids with class-specific colours
    tex = np.zeros((3, size, size))
    for _ in range(2):
        angle = crng.uniform(0, np.pi)
        freq = crng.uniform(1.5, 5.0)
        phase = crng.uniform(0, 2 * np.pi)
        color = crng.normal(size=3)
        color /= np.linalg.norm(color)
        jitter = irng.normal(scale=1.0)
        amp = irng.uniform(0.4, 1.3)
        wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase + jitter)
        tex += amp * color[:, None, None] * wave

    # class blob at a class-specific position
    cx, cy = crng.uniform(0.25, 0.75, size=2) + irng.normal(scale=0.1, size=2)
    radius = crng.uniform(0.12, 0.22)
    blob_color = crng.normal(size=3)
    blob_color /= np.linalg.norm(blob_color)
    mask = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * radius ** 2))

    # domain background: a smooth gradient that fades out under shift
    bg0 = 0.3 * (xx - 0.5) + 0.2 * (yy - 0.5)
    s = domain_shift
    centred = 0.25 * tex + 0.45 * blob_color[:, None, None] * mask + (1.0 - s) * bg0[None]
    centred += irng.normal(scale=0.25, size=centred.shape)
    if s:
        # patch-periodic stripes and a colour cast, shared by the whole domain
        _, px = np.meshgrid(np.arange(size) % 8, np.arange(size) % 8, indexing="ij")
        tile = np.sign(np.sin(2 * np.pi * (px + 0.5) / 8 + drng.uniform(0, 2 * np.pi)))
        centred += s * SHIFT_STRIPES * _unit(drng.normal(size=3))[:, None, None] * tile[None]
        centred += s * SHIFT_CAST * _unit(drng.normal(size=3))[:, None, None]
        # nuisance gratings with a random amplitude per image
        for _ in range(3):
            angle = drng.uniform(0, np.pi)
            freq = drng.uniform(2.0, 6.0)
            phase = irng.uniform(0, 2 * np.pi)
            color = _unit(drng.normal(size=3))
            wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
            centred += s * SHIFT_NUISANCE * irng.normal() * color[:, None, None] * wave[None]
        # invert the hue: rotate chroma towards the complementary colour
        rot = _rotation_about_gray(np.pi * s * SHIFT_HUE)
        centred = np.einsum("ij,jhw->ihw", rot, centred)
    img = 0.5 + centred
    img.setflags(write=False)
    return img


def generate_image(class_id, index, domain_shift=0.0, seed=0, size=IMAGE_SIZE):
    """Deterministic (3, size, size) image for one (class, index) pair."""
    return _render(int(class_id), int(index), float(domain_shift), int(seed), int(size)).copy()


@dataclass
class EpisodePlan:
    """Index-level description of an episode, before any image is rendered."""

    way: int
    classes: np.ndarray
    support_index: list
    query_index: list
    support_labels: np.ndarray
    query_labels: np.ndarray

    @property
    def shots(self):
        return np.bincount(self.support_labels, minlength=self.way).tolist()


def plan_episode(class_count, rng, max_shot=10, M=10, images_per_class=40):
    """Draw way, classes and per-class image indices (no rendering)."""
    if class_count < MIN_WAY:
        raise ValueError(f"need at least {MIN_WAY} classes, source has {class_count}")
    if max_shot < 1 or M < 1:
        raise ValueError("max_shot and M must be positive")
    if M + max_shot > images_per_class:
        raise ValueError("images_per_class too small for M query plus max_shot support images")
    way = int(rng.integers(MIN_WAY, min(MAX_WAY, class_count) + 1))
    classes = rng.choice(class_count, size=way, replace=False)
    s_idx, q_idx, s_lab, q_lab = [], [], [], []
    for label, k in enumerate(classes):
        shots = int(rng.integers(1, max_shot + 1))
        picks = rng.choice(images_per_class, size=M + shots, replace=False)
        q_idx += [(int(k), int(i)) for i in picks[:M]]
        s_idx += [(int(k), int(i)) for i in picks[M:]]
        q_lab += [label] * M
        s_lab += [label] * shots
    return EpisodePlan(way, np.asarray(classes), s_idx, q_idx,
                       np.asarray(s_lab, dtype=np.int64), np.asarray(q_lab, dtype=np.int64))


def sample_episode(source, rng, max_shot=10, M=10):
    """Draw one episode: way uniform on 5..min(50, |C|), per-class shots 1..max_shot."""
    plan = plan_episode(source.class_count, rng, max_shot, M, source.images_per_class)
    return Episode(
        way=plan.way,
        classes=plan.classes,
        support_images=source.images(*zip(*plan.support_index)),
        support_labels=plan.support_labels,
        query_images=source.images(*zip(*plan.query_index)),
        query_labels=plan.query_labels,
        support_index=plan.support_index,
        query_index=plan.query_index,
    )


def episode_rng(seed, episode_id):
    """Independent generator per episode so streams do not depend on worker order."""
    return np.random.default_rng([int(seed), int(episode_id)])


def episode_stream(source, seed, count, max_shot=10, M=10, start=0):
    for i in range(start, start + count):
        yield i, sample_episode(source, episode_rng(seed, i), max_shot=max_shot, M=M)
