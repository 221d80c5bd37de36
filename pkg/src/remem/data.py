"""Procedural shapes datasets, the RMDS file format, and stratified splits."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import MagicError, ParameterError, TruncationError, ValidationError, VersionError

SHAPES = ("square", "circle", "triangle", "cross")
# pure primaries: noiseless pixels are exactly 0 or 1
COLORS = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
)
VOCAB_SIZE = len(SHAPES) * len(COLORS)

MAGIC = b"RMDS"
VERSION = 1


@dataclass
class Dataset:
    images: np.ndarray  # N x c x h x w, float32 in [0, 1]
    labels: np.ndarray  # N, int64
    n_classes: int
    split: str = "all"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValidationError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise ValidationError(f"images must be N x c x h x w, got {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValidationError("pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValidationError(f"label outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def subset(self, idx, split: str | None = None) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes,
                       split or self.split, dict(self.provenance))


@dataclass
class ShapesSpec:
    """Class ``c`` is shape ``SHAPES[c % 4]`` drawn in color bin ``c // 4``."""

    n_classes: int = 4
    image_size: int = 16
    samples_per_class: int = 50
    noise: float = 0.0
    seed: int = 0
    channels: int = 3


PRESETS = {
    # few examples, many classes: teachers memorize it quickly
    "memorization": ShapesSpec(n_classes=12, image_size=16, samples_per_class=12, noise=0.25),
    "separable": ShapesSpec(n_classes=2, image_size=16, samples_per_class=100, noise=0.0),
    "standard": ShapesSpec(n_classes=8, image_size=16, samples_per_class=60, noise=0.15),
}


def _mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == "triangle":
        # apex up, base at cy + r
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if shape == "cross":
        w = max(r / 3, 0.75)
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    raise ParameterError(f"unknown shape {shape!r}")


def generate_shapes(spec: ShapesSpec) -> Dataset:
    if spec.image_size < 8:
        raise ParameterError(f"image_size must be >= 8, got {spec.image_size}")
    if not 1 <= spec.n_classes <= VOCAB_SIZE:
        raise ParameterError(f"n_classes must lie in [1, {VOCAB_SIZE}], got {spec.n_classes}")
    if spec.channels not in (1, 3):
        raise ParameterError("channels must be 1 or 3")
    if spec.samples_per_class < 1:
        raise ParameterError("samples_per_class must be >= 1")
    rng = np.random.default_rng(spec.seed)
    s = spec.image_size
    n = spec.n_classes * spec.samples_per_class
    images = np.zeros((n, spec.channels, s, s), dtype=np.float64)
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    for i, c in enumerate(labels):
        shape = SHAPES[c % len(SHAPES)]
        color = np.asarray(COLORS[c // len(SHAPES)])
        r = rng.uniform(0.18, 0.32) * s
        cx = rng.uniform(r, s - r)
        cy = rng.uniform(r, s - r)
        m = _mask(shape, s, cx, cy, r)
        if spec.channels == 3:
            images[i] = m[None] * color[:, None, None]
        else:
            images[i, 0] = m
    if spec.noise > 0:
        images += rng.normal(0.0, spec.noise, images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), spec.n_classes, "all",
                   {"generator": "shapes", **spec.__dict__})


def preset(name: str, **overrides) -> Dataset:
    if name not in PRESETS:
        raise ParameterError(f"unknown dataset preset {name!r}; choose from {sorted(PRESETS)}")
    spec = ShapesSpec(**{**PRESETS[name].__dict__, **overrides})
    ds = generate_shapes(spec)
    ds.provenance["preset"] = name
    return ds


def split(dataset: Dataset, fractions=(0.5, 0.5), seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified train/test split; every class lands in both parts."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ParameterError(f"fractions must be two non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < 2:
            raise ParameterError(f"class {c} has {len(idx)} example(s); stratification needs >= 2")
        idx = rng.permutation(idx)
        n_train = int(np.clip(np.round(len(idx) * fractions[0]), 1, len(idx) - 1))
        train_idx.append(idx[:n_train])
        test_idx.append(idx[n_train:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return dataset.subset(tr, "train"), dataset.subset(te, "test")


def save_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    n, c, h, w = dataset.images.shape
    pixels = np.round(dataset.images.transpose(0, 2, 3, 1) * 255).astype(np.uint8)
    parts = [MAGIC, struct.pack("<II", VERSION, n), struct.pack("<HHHH", h, w, c, dataset.n_classes)]
    for i in range(n):
        parts.append(struct.pack("<H", int(dataset.labels[i])))
        parts.append(pixels[i].tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MagicError(f"{path}: bad magic, expected {MAGIC!r}")
    if len(buf) < 20:
        raise TruncationError(f"{path}: header truncated", len(buf))
    version, n = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported dataset version {version}")
    h, w, c, n_classes = struct.unpack_from("<HHHH", buf, 12)
    rec = 2 + h * w * c
    pos = 20
    labels = np.empty(n, dtype=np.int64)
    pixels = np.empty((n, h, w, c), dtype=np.uint8)
    for i in range(n):
        if pos + rec > len(buf):
            raise TruncationError(f"{path}: record {i} truncated", pos)
        (labels[i],) = struct.unpack_from("<H", buf, pos)
        if labels[i] >= n_classes:
            raise ValidationError(f"{path}: record {i} has label {labels[i]} >= n_classes {n_classes}")
        pixels[i] = np.frombuffer(buf, np.uint8, h * w * c, pos + 2).reshape(h, w, c)
        pos += rec
    if pos != len(buf):
        raise ValidationError(f"{path}: {len(buf) - pos} trailing bytes")
    images = pixels.transpose(0, 3, 1, 2).astype(np.float32) / 255.0
    return Dataset(images, labels, n_classes, "all", {"file": str(path)})


def quantize_u8(images: np.ndarray) -> np.ndarray:
    """Pixels as they survive a save/load round trip."""
    return (np.round(images * 255).astype(np.uint8).astype(np.float32) / 255.0)
