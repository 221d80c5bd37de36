"""Expertness of MLP blocks, the MoE information bound, and neuron criticality.

An MLP block is viewed as a bipartite graph between neurons (rows) and
inputs (columns) with edge weight ``E[i, j]`` = activation of neuron i on
input j. Expertness is the largest fraction of the squared-edge mass that a
k-way co-partition into (neuron cluster, input cluster) pairs can keep.
"""

from __future__ import annotations

import csv
import itertools
import math
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from sklearn.cluster import KMeans

from . import tensor as T
from .data import Dataset
from .errors import DomainError, ParameterError, SizeError, StructuralError
from .nn import ReMemConfig, VitModel, forward

ENUM_LIMIT = 10 ** 7
MOE_SUPPORT_LIMIT = 10 ** 4


@dataclass
class ActivationGraph:
    E: np.ndarray  # neurons x inputs, non-negative

    def __post_init__(self):
        self.E = np.asarray(self.E, dtype=np.float64)
        if self.E.ndim != 2:
            raise ParameterError(f"activation graph must be 2-D, got {self.E.shape}")
        if not np.isfinite(self.E).all():
            raise DomainError("activation graph has non-finite entries")
        if (self.E < 0).any():
            raise DomainError("activation graph has negative entries")

    @property
    def n_neurons(self) -> int:
        return self.E.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.E.shape[1]


@dataclass
class Bipartition:
    neuron_labels: np.ndarray
    input_labels: np.ndarray
    k: int

    def clusters(self):
        for c in range(self.k):
            yield np.flatnonzero(self.neuron_labels == c), np.flatnonzero(self.input_labels == c)


@dataclass
class ExpertnessResult:
    e: float
    bipartition: Bipartition


def _matrix(E) -> np.ndarray:
    return E.E if isinstance(E, ActivationGraph) else np.asarray(E, dtype=np.float64)


def cut(E, rows, cols) -> float:
    """Sum of squared edges between a neuron set and an input set."""
    E = _matrix(E)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size == 0 or cols.size == 0:
        return 0.0
    if rows.min() < 0 or rows.max() >= E.shape[0] or cols.min() < 0 or cols.max() >= E.shape[1]:
        raise ParameterError("cut: index out of bounds")
    sub = E[np.ix_(rows, cols)]
    return float(np.sum(sub * sub))


def partition_score(E, part: Bipartition) -> float:
    E = _matrix(E)
    total = float(np.sum(E * E))
    if total == 0:
        return 0.0
    return sum(cut(E, r, c) for r, c in part.clusters()) / total


def _check_k(k: int, n_rows: int, n_cols: int) -> None:
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if k > min(n_rows, n_cols):
        raise ParameterError(f"k={k} exceeds min(neurons, inputs)={min(n_rows, n_cols)}")


def _surjective_labelings(n: int, k: int) -> np.ndarray:
    """All labelings of n items with k labels that use every label."""
    labs = np.array(list(itertools.product(range(k), repeat=n)), dtype=np.int64).reshape(-1, n)
    used = np.stack([(labs == c).any(axis=1) for c in range(k)], axis=1).all(axis=1)
    return labs[used]


def expertness_bruteforce(E, k: int) -> ExpertnessResult:
    """Exhaustive maximum over all co-partitions with non-empty clusters.

    Every neuron labeling is paired with every input labeling; the guard
    ``k ** (neurons + inputs) <= 1e7`` bounds the work.
    """
    E = _matrix(E)
    u, x = E.shape
    _check_k(k, u, x)
    if float(k) ** (u + x) > ENUM_LIMIT:
        raise SizeError(f"{k}^{u + x} assignments exceed the enumeration guard {ENUM_LIMIT}")
    A = E * E
    total = A.sum()
    row_labs = _surjective_labelings(u, k)
    col_labs = _surjective_labelings(x, k)
    cols = np.arange(x)
    best, best_r, best_c = -1.0, None, None
    for rl in row_labs:
        # S[c, j]: squared mass of input j on neurons labelled c
        S = np.stack([A[rl == c].sum(axis=0) for c in range(k)])
        kept = S[col_labs, cols].sum(axis=1)
        j = int(np.argmax(kept))
        if kept[j] > best:
            best, best_r, best_c = float(kept[j]), rl.copy(), col_labs[j].copy()
    part = Bipartition(best_r, best_c, k)
    return ExpertnessResult(0.0 if total == 0 else best / total, part)


def _repair(labels: np.ndarray, emb: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Give every cluster at least one member by moving the closest donor from a larger cluster."""
    labels = labels.copy()
    for c in range(k):
        if (labels == c).any():
            continue
        counts = np.bincount(labels, minlength=k)
        donors = np.flatnonzero(counts[labels] > 1)
        d = np.linalg.norm(emb[donors] - centers[c], axis=1)
        labels[donors[int(np.argmin(d))]] = c
    return labels


def expertness_spectral(E, k: int, seed: int = 0) -> ExpertnessResult:
    """Spectral co-clustering on squared activations, scored with ``cut``.

    ``A = E**2`` is normalised as ``D1^-1/2 A D2^-1/2``; the trivial singular
    pair is deflated and the next ``ceil(log2 k)`` pairs, rescaled by the
    degree matrices, embed neurons and inputs jointly for k-means.
    """
    E = _matrix(E)
    u, x = E.shape
    _check_k(k, u, x)
    A = E * E
    if not A.any():
        raise DomainError("activation graph has no nonzero entry")
    if k == 1:
        part = Bipartition(np.zeros(u, np.int64), np.zeros(x, np.int64), 1)
        return ExpertnessResult(1.0, part)
    d1 = A.sum(axis=1)
    d2 = A.sum(axis=0)
    d1[d1 == 0] = 1.0
    d2[d2 == 0] = 1.0
    r1, r2 = 1 / np.sqrt(d1), 1 / np.sqrt(d2)
    An = r1[:, None] * A * r2[None, :]
    u0 = np.sqrt(d1) / np.linalg.norm(np.sqrt(d1))
    v0 = np.sqrt(d2) / np.linalg.norm(np.sqrt(d2))
    s0 = float(u0 @ An @ v0)
    U, _, Vt = np.linalg.svd(An - s0 * np.outer(u0, v0), full_matrices=False)
    n_vec = max(1, math.ceil(math.log2(k)))
    emb = np.vstack([r1[:, None] * U[:, :n_vec], r2[:, None] * Vt[:n_vec].T])
    km = KMeans(n_clusters=k, init="k-means++", n_init=5, max_iter=100, random_state=seed % (2 ** 32))
    labels = km.fit_predict(emb)
    rows, cols = labels[:u], labels[u:]
    rows = _repair(rows, emb[:u], km.cluster_centers_, k)
    cols = _repair(cols, emb[u:], km.cluster_centers_, k)
    part = Bipartition(rows, cols, k)
    return ExpertnessResult(partition_score(E, part), part)


# -- graphs from a model ---------------------------------------------------

def extract_graph(model: VitModel, remem: ReMemConfig | None, layer: int, images: np.ndarray,
                  aggregate: str = "l2", batch_size: int = 256) -> ActivationGraph:
    """Neuron x input activation graph of one MLP block.

    ``aggregate="l2"`` reduces each neuron's activations over tokens with an
    L2 norm; ``"concat"`` keeps one row per (neuron, token) pair.
    """
    c = model.config
    remem = remem or ReMemConfig()
    if not 0 <= layer < c.n_layers:
        raise ParameterError(f"layer {layer} outside [0, {c.n_layers})")
    if remem.mlp_pruned(layer, c.n_layers):
        raise StructuralError(f"MLP block of layer {layer} is pruned")
    images = np.asarray(images)
    if len(images) == 0:
        raise ParameterError("empty dataset")
    cols = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            a = forward(model, remem, images[i:i + batch_size]).mlp_activations[layer].data.astype(np.float64)
            if aggregate == "l2":
                cols.append(np.sqrt((a * a).sum(axis=1)))  # b x d_mlp
            elif aggregate == "concat":
                cols.append(a.transpose(0, 2, 1).reshape(len(a), -1))  # neuron-major rows
            else:
                raise ParameterError(f"unknown aggregate {aggregate!r}")
    return ActivationGraph(np.concatenate(cols, axis=0).T)


EXPERTNESS_HEADER = ("layer", "expertness", "k", "n_neurons", "n_inputs", "seed")


def expertness_profile(model: VitModel, remem: ReMemConfig | None, dataset: Dataset, k: int | None = None,
                       seed: int = 0, aggregate: str = "l2") -> list[dict]:
    k = k or dataset.n_classes
    rows = []
    for layer in range(model.config.n_layers):
        g = extract_graph(model, remem, layer, dataset.images, aggregate)
        res = expertness_spectral(g, k, seed)
        rows.append({"layer": layer, "expertness": res.e, "k": k, "n_neurons": g.n_neurons,
                     "n_inputs": g.n_inputs, "seed": seed})
    return rows


# -- MoE MLP and its information bound -------------------------------------

@dataclass
class MoeMlp:
    """Single-expert-routed MLP: ``(1_{S_z} * q_b(relu(x W1))) W2``.

    ``bits=None`` disables quantisation. ``act_lo``/``act_hi`` give each
    neuron's quantisation range; set them with ``calibrate``.
    """

    w1: np.ndarray
    w2: np.ndarray
    experts: Sequence[Sequence[int]]
    router: Callable[[np.ndarray], int]
    bits: int | None = None
    act_lo: np.ndarray | None = None
    act_hi: np.ndarray | None = None

    def __post_init__(self):
        d_mlp = self.w1.shape[1]
        if self.w2.shape[0] != d_mlp:
            raise ParameterError(f"W1 {self.w1.shape} and W2 {self.w2.shape} disagree on d_mlp")
        self.masks = []
        for z, s in enumerate(self.experts):
            s = np.asarray(s, dtype=np.int64)
            if s.size == 0:
                raise ParameterError(f"expert {z} has an empty neuron set")
            if s.min() < 0 or s.max() >= d_mlp:
                raise ParameterError(f"expert {z} indexes a neuron outside [0, {d_mlp})")
            m = np.zeros(d_mlp)
            m[s] = 1.0
            self.masks.append(m)
        if self.bits is not None and self.bits < 1:
            raise ParameterError("bits must be >= 1")

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def calibrate(self, inputs: np.ndarray) -> None:
        acts = np.maximum(np.asarray(inputs) @ self.w1, 0)
        self.act_lo, self.act_hi = acts.min(axis=0), acts.max(axis=0)

    def quantize(self, acts: np.ndarray) -> np.ndarray:
        if self.bits is None:
            return acts
        if self.act_lo is None:
            raise ParameterError("quantised MoE needs calibrate() first")
        levels = 2 ** self.bits - 1
        span = np.where(self.act_hi > self.act_lo, self.act_hi - self.act_lo, 1.0)
        q = np.round(np.clip((acts - self.act_lo) / span, 0, 1) * levels)
        return self.act_lo + q * span / levels


def moe_forward(moe: MoeMlp, x: np.ndarray) -> np.ndarray:
    """Rows of ``x`` routed one expert each; neurons outside the expert are exactly 0."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    acts = moe.quantize(np.maximum(x @ moe.w1, 0))
    z = np.array([moe.router(row) for row in x])
    if z.min() < 0 or z.max() >= moe.n_experts:
        raise ParameterError("router returned an expert index out of range")
    masks = np.stack(moe.masks)[z]
    return (masks * acts) @ moe.w2


def moe_mi_bound(n_experts: int, expert_sizes: Sequence[int], bits: int) -> float:
    """Upper bound in bits: ``log2 M + sum_z |S_z| * b``."""
    if n_experts < 1 or bits < 1 or any(s < 1 for s in expert_sizes):
        raise ParameterError("need M >= 1, b >= 1 and every expert size >= 1")
    return math.log2(n_experts) + sum(expert_sizes) * bits


def output_entropy(outputs: np.ndarray, probs: np.ndarray | None = None) -> float:
    """Entropy in bits of the empirical output alphabet (exact match on values)."""
    outputs = np.ascontiguousarray(outputs)
    n = len(outputs)
    probs = np.full(n, 1.0 / n) if probs is None else np.asarray(probs, dtype=np.float64)
    mass: dict[bytes, float] = {}
    for row, p in zip(outputs, probs):
        key = row.tobytes()
        mass[key] = mass.get(key, 0.0) + p
    pm = np.array([m for m in mass.values() if m > 0])
    return float(-(pm * np.log2(pm)).sum())


def moe_mi_empirical(moe: MoeMlp, support: np.ndarray, probs: np.ndarray | None = None) -> float:
    """Exact I(MLP(X); X) in bits for a finite input distribution.

    The block is deterministic, so the information equals the entropy of its output.
    """
    support = np.asarray(support, dtype=np.float64)
    if len(support) > MOE_SUPPORT_LIMIT:
        raise SizeError(f"support of {len(support)} inputs exceeds {MOE_SUPPORT_LIMIT}")
    out = moe_forward(moe, support) + 0.0  # folds -0.0 into 0.0
    return output_entropy(out, probs)


# -- criticality -----------------------------------------------------------

@dataclass
class Criticality:
    neurons: np.ndarray  # indices sorted by descending sigma
    sigma: np.ndarray


def criticality_from_fn(embed: Callable[[np.ndarray | None], np.ndarray], n_neurons: int,
                        min_norm: float = 1e-9) -> Criticality:
    """``sigma(h) = max_i |F_i^{h<-0} - F_i| / |F_i|``.

    ``embed(mask)`` returns the N x d embeddings with the neuron mask applied
    (``None`` for the unmodified network).
    """
    base = np.asarray(embed(None), dtype=np.float64)
    norms = np.linalg.norm(base, axis=1)
    keep = norms >= min_norm
    if not keep.any():
        raise DomainError("every input has a (near) zero embedding; criticality undefined")
    sigma = np.zeros(n_neurons)
    for h in range(n_neurons):
        mask = np.ones(n_neurons)
        mask[h] = 0.0
        moved = np.asarray(embed(mask), dtype=np.float64)
        rel = np.linalg.norm(moved[keep] - base[keep], axis=1) / norms[keep]
        sigma[h] = rel.max()
    order = np.argsort(-sigma, kind="stable")
    return Criticality(order, sigma[order])


def criticality(model: VitModel, remem: ReMemConfig | None, images: np.ndarray, layer: int) -> Criticality:
    c = model.config
    remem = remem or ReMemConfig()
    if not 0 <= layer < c.n_layers:
        raise ParameterError(f"layer {layer} outside [0, {c.n_layers})")
    if remem.mlp_pruned(layer, c.n_layers):
        return Criticality(np.arange(c.d_mlp), np.zeros(c.d_mlp))

    def embed(mask):
        with T.no_grad():
            nm = None if mask is None else {layer: mask}
            return forward(model, remem, images, neuron_mask=nm).cls_embedding.data

    return criticality_from_fn(embed, c.d_mlp)


def write_rows(rows: list[dict], header: Sequence[str], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, header, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
