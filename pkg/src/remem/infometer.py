"""Reconstruction-based proxy for the information a feature map keeps about its input.

A small decoder learns to rebuild the pixels from the features; the lower
its held-out binary cross-entropy, the more input information survived.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ParameterError, ShapeError, UsageError
from .nn import ReMemConfig, VitModel, accuracy, linear, predict
from .optim import AdamwState, adamw_step, zero_grad
from .seeding import derive_seed
from .tensor import Tensor

HIDDEN = 256
INFO_PLANE_HEADER = ("tag", "teacher_err", "mi_proxy", "baseline_loss", "d_embed", "seed")


class DecoderModel:
    """linear(d -> 256) -> relu -> linear(256 -> pixels) -> sigmoid."""

    def __init__(self, d_in: int, n_pixels: int, seed: int = 0, hidden: int = HIDDEN):
        rng = np.random.default_rng(seed)
        self.params = {
            "w1": T.parameter(rng.normal(0, math.sqrt(2.0 / d_in), (d_in, hidden)), "w1"),
            "b1": T.parameter(np.zeros(hidden), "b1"),
            "w2": T.parameter(rng.normal(0, 0.01, (hidden, n_pixels)), "w2"),
            "b2": T.parameter(np.zeros(n_pixels), "b2"),
        }
        self.d_in, self.n_pixels = d_in, n_pixels

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def logits(self, features) -> Tensor:
        P = self.params
        x = features if isinstance(features, Tensor) else Tensor(features)
        h = T.relu(linear(x, P["w1"], P["b1"]))
        return linear(h, P["w2"], P["b2"])

    def __call__(self, features) -> Tensor:
        return T.sigmoid(self.logits(features))

    def loss(self, features: np.ndarray, images: np.ndarray) -> float:
        """Mean per-pixel BCE (nats) without recording a tape."""
        with T.no_grad():
            return T.bce_with_logits(self.logits(features), images).item()


def train_decoder(features: np.ndarray, images: np.ndarray, updates: int = 2000, seed: int = 0,
                  batch_size: int = 64, lr: float = 1e-3, weight_decay: float = 1e-4) -> DecoderModel:
    """Fit a decoder from ``features`` (N x d) to flattened ``images`` (N x pixels) with AdamW."""
    features = np.asarray(features)
    images = np.asarray(images)
    if images.ndim != 2:
        images = images.reshape(len(images), -1)
    if len(features) != len(images):
        raise ShapeError(f"{len(features)} feature rows for {len(images)} images")
    if images.min() < 0 or images.max() > 1:
        raise ParameterError("pixel targets must lie in [0, 1]")
    dec = DecoderModel(features.shape[1], images.shape[1], seed=derive_seed(seed, "decoder-init"))
    opt = AdamwState(lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(derive_seed(seed, "decoder-batches"))
    n = len(features)
    if updates > 0:
        # start from the best constant predictor: per-pixel mean logits
        mean = np.clip(images.mean(axis=0), 1e-4, 1 - 1e-4)
        dec.params["b2"].data = np.log(mean / (1 - mean)).astype(dec.params["b2"].data.dtype)
    params = dec.parameters()
    full_batch = n <= batch_size
    for _ in range(updates):
        if full_batch:
            xb, yb = features, images
        else:
            idx = rng.choice(n, batch_size, replace=False)
            xb, yb = features[idx], images[idx]
        zero_grad(params)
        loss = T.bce_with_logits(dec.logits(xb), yb)
        T.backward(loss)
        adamw_step(opt, params)
    zero_grad(params)
    return dec


def mean_image_bce(train_images: np.ndarray, eval_images: np.ndarray) -> float:
    """BCE of predicting every pixel by its training-set mean."""
    p = np.clip(train_images.reshape(len(train_images), -1).mean(axis=0), 1e-7, 1 - 1e-7)
    y = eval_images.reshape(len(eval_images), -1)
    return float(-(y * np.log(p) + (1 - y) * np.log1p(-p)).mean())


@dataclass(frozen=True)
class MiEstimate:
    recon_loss: float
    baseline_loss: float
    n_train_updates: int
    d_embed: int

    @property
    def mi_proxy(self) -> float:
        return -self.recon_loss

    def _check(self, other: MiEstimate) -> None:
        if self.d_embed != other.d_embed:
            raise UsageError(f"MI estimates with feature widths {self.d_embed} and {other.d_embed} "
                             "are not comparable")

    def __lt__(self, other: MiEstimate) -> bool:
        self._check(other)
        return self.mi_proxy < other.mi_proxy

    def __gt__(self, other: MiEstimate) -> bool:
        self._check(other)
        return self.mi_proxy > other.mi_proxy

    def __le__(self, other):
        return not self > other

    def __ge__(self, other):
        return not self < other


def estimate_from_features(features: np.ndarray, images: np.ndarray, updates: int = 2000,
                           seed: int = 0, holdout: float = 0.2) -> MiEstimate:
    """Train on a seeded 80% of the rows, report BCE on the remaining 20%."""
    n = len(features)
    if n < 2:
        raise ParameterError("need at least 2 examples to hold some out")
    perm = np.random.default_rng(derive_seed(seed, "mi-split")).permutation(n)
    n_eval = min(max(1, int(round(n * holdout))), n - 1)
    ev, tr = perm[:n_eval], perm[n_eval:]
    flat = images.reshape(n, -1)
    dec = train_decoder(features[tr], flat[tr], updates, seed)
    return MiEstimate(dec.loss(features[ev], flat[ev]), mean_image_bce(flat[tr], flat[ev]),
                      updates, features.shape[1])


def mi_proxy(model: VitModel, remem: ReMemConfig | None, dataset: Dataset, updates: int = 2000,
             seed: int = 0) -> MiEstimate:
    """MI proxy of the final-layernorm CLS embedding over ``dataset``."""
    feats = predict(model, remem, dataset.images, what="cls_embedding").astype(np.float32)
    return estimate_from_features(feats, dataset.images, updates, seed)


@dataclass
class InfoPlanePoint:
    tag: str
    teacher_err: float
    mi_proxy: float
    baseline_loss: float
    d_embed: int
    seed: int


def info_plane_point(model: VitModel, remem: ReMemConfig | None, dataset: Dataset, updates: int = 2000,
                     seed: int = 0, tag: str = "") -> InfoPlanePoint:
    logits = predict(model, remem, dataset.images)
    est = mi_proxy(model, remem, dataset, updates, seed)
    return InfoPlanePoint(tag, 1.0 - accuracy(logits, dataset.labels), est.mi_proxy, est.baseline_loss,
                          est.d_embed, seed)


def write_info_plane(points, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, INFO_PLANE_HEADER, extrasaction="ignore")
        w.writeheader()
        for p in points:
            w.writerow(asdict(p) if not isinstance(p, dict) else p)
