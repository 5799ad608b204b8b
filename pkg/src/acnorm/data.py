"""Synthetic image tasks with controllable domain gaps.

Images are single-channel NHWC float arrays: a sinusoidal background texture,
bright foreground shapes (elliptical blobs or wavy vessel-like bands), a global
intensity offset and Gaussian noise. Segmentation labels are the shape masks;
classification labels are the shape count or the shape family.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError

SPLITS = {"train": 0, "val": 1, "test": 2}
SHAPE_FAMILIES = ("blobs", "vessels", "mixed")


@dataclass
class SyntheticTaskSpec:
    task: str = "segmentation"
    image_size: tuple = (64, 64)
    n_train: int = 128
    n_val: int = 32
    n_test: int = 64
    intensity_shift: float = 0.0
    texture_freq: float = 3.0
    shape_family: str = "blobs"
    noise_sigma: float = 0.2
    contrast: float = 1.0
    max_shapes: int = 3
    num_classes: int = 2
    label_kind: str = "count"
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        if self.task not in ("segmentation", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.shape_family not in SHAPE_FAMILIES:
            raise ConfigError(f"shape_family must be one of {SHAPE_FAMILIES}")
        if self.label_kind not in ("count", "family"):
            raise ConfigError("label_kind must be 'count' or 'family'")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("split counts must be >= 1")
        if len(self.image_size) != 2 or min(self.image_size) < 8:
            raise ConfigError(f"image_size must be (H, W) with both >= 8, got {self.image_size}")
        if self.noise_sigma < 0 or self.max_shapes < 1:
            raise ConfigError("noise_sigma must be >= 0 and max_shapes >= 1")
        if self.task == "classification" and self.label_kind == "count" and self.num_classes > self.max_shapes:
            raise ConfigError("count labels need num_classes <= max_shapes")

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=list).encode()).hexdigest()[:12]


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    task: str
    split: str
    provenance: str

    def __len__(self):
        return len(self.images)

    def require_split(self, *allowed):
        if self.split not in allowed:
            raise DataError(f"{self.provenance}: split {self.split!r} not allowed here (expected {allowed})")


def _grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy, xx


def _blob(rng, yy, xx, h, w):
    r = min(h, w)
    cy, cx = rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.2 * w, 0.8 * w)
    ay, ax = rng.uniform(0.07, 0.16, size=2) * r
    th = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _vessel(rng, yy, xx, h, w):
    r = min(h, w)
    cy, cx = rng.uniform(0.3 * h, 0.7 * h), rng.uniform(0.3 * w, 0.7 * w)
    th = rng.uniform(0, np.pi)
    amp = rng.uniform(0.03, 0.1) * r
    period = rng.uniform(0.3, 0.6) * r
    phase = rng.uniform(0, 2 * np.pi)
    half_width = rng.uniform(0.025, 0.045) * r
    length = rng.uniform(0.5, 0.8) * r
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    return (np.abs(v - amp * np.sin(2 * np.pi * u / period + phase)) <= half_width) & (np.abs(u) <= length / 2)


def _sample(rng, spec: SyntheticTaskSpec, yy, xx):
    h, w = spec.image_size
    n_shapes = int(rng.integers(1, spec.max_shapes + 1))
    by_family = spec.task == "classification" and spec.label_kind == "family"
    family = rng.choice(["blobs", "vessels"]) if by_family else spec.shape_family
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(n_shapes):
        f = rng.choice(["blobs", "vessels"]) if family == "mixed" else family
        mask |= (_blob if f == "blobs" else _vessel)(rng, yy, xx, h, w)
    th = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    texture = 0.3 * np.sin(2 * np.pi * spec.texture_freq * (xx * np.cos(th) + yy * np.sin(th)) / w + phase)
    img = texture + spec.contrast * mask + spec.intensity_shift
    img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape) if spec.noise_sigma > 0 else img
    if spec.task == "segmentation":
        label = mask
    elif spec.label_kind == "count":
        label = min(n_shapes, spec.num_classes) - 1
    else:
        label = int(family == "vessels")
    return img, label


def generate_split(spec: SyntheticTaskSpec, split: str) -> Dataset:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    n = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}[split]
    h, w = spec.image_size
    yy, xx = _grid(h, w)
    rng = np.random.default_rng([spec.seed, SPLITS[split]])
    images = np.empty((n, h, w, 1), dtype=np.float32)
    if spec.task == "segmentation":
        labels = np.empty((n, h, w, 1), dtype=np.float32)
    else:
        labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        img, label = _sample(rng, spec, yy, xx)
        images[i, :, :, 0] = img
        if spec.task == "segmentation":
            labels[i, :, :, 0] = label
        else:
            labels[i] = label
    return Dataset(images, labels, spec.task, split, f"{spec.digest()}:{split}")


def generate_task(spec: SyntheticTaskSpec):
    """All three splits; each split draws from its own seeded stream."""
    if isinstance(spec, dict):
        spec = SyntheticTaskSpec(**spec)
    return {split: generate_split(spec, split) for split in SPLITS}
