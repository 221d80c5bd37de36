"""SGD with momentum, the SAM wrapper, AdamW, and warmup + cosine schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import NumericError, ParameterError, UsageError
from .tensor import Tensor


@dataclass
class Schedule:
    """Linear warmup from 0 to ``peak_lr`` then cosine decay to 0 at ``total_steps``."""

    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ParameterError(f"bad schedule: warmup {self.warmup_steps}, total {self.total_steps}")


def lr_at(schedule: Schedule | float, step: int) -> float:
    if not isinstance(schedule, Schedule):
        return float(schedule)
    s = schedule
    if not 0 <= step <= s.total_steps:
        raise ParameterError(f"step {step} outside [0, {s.total_steps}]")
    if step <= s.warmup_steps and s.warmup_steps > 0:
        return s.peak_lr * step / s.warmup_steps
    if s.total_steps == s.warmup_steps:
        return s.peak_lr
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return 0.5 * s.peak_lr * (1.0 + math.cos(math.pi * progress))


def _decays(p: Tensor) -> bool:
    # biases, layernorm parameters, cls token: no weight decay
    return p.ndim >= 2


def _grads(params: Sequence[Tensor], grads) -> list[np.ndarray]:
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise UsageError(f"{len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if g is None:
            raise UsageError(f"missing gradient for parameter {p.name or p.shape}")
    return list(grads)


@dataclass
class SgdState:
    lr: Schedule | float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be >= 0")


def sgd_step(state: SgdState, params: Sequence[Tensor], grads=None, step: int = 0) -> None:
    """``v <- mu v + g + wd w``; ``w <- w - lr(step) v``, in place."""
    grads = _grads(params, grads)
    lr = lr_at(state.lr, step)
    for p, g in zip(params, grads):
        if state.weight_decay and _decays(p):
            g = g + state.weight_decay * p.data
        v = state.velocity.get(id(p))
        v = g if v is None else state.momentum * v + g
        state.velocity[id(p)] = v
        p.data = (p.data - lr * v).astype(p.data.dtype, copy=False)


@dataclass
class SamConfig:
    rho: float = 0.05

    def __post_init__(self):
        if self.rho < 0:
            raise ParameterError(f"rho must be >= 0, got {self.rho}")


@dataclass
class SamResult:
    loss: float
    perturbation_norm: float


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def _loss_and_grads(params, loss_fn) -> tuple[float, list[np.ndarray]]:
    zero_grad(params)
    loss = loss_fn()
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    T.backward(loss)
    return value, [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def sam_step(sam: SamConfig, base: SgdState, params: Sequence[Tensor],
             loss_fn: Callable[[], Tensor], step: int = 0) -> SamResult:
    """One SAM update: ascend to ``w + rho g/|g|``, take the gradient there, restore ``w``,
    and let the base optimizer apply that gradient.

    The perturbation is normalised over all parameters jointly. ``loss_fn``
    must evaluate the data loss on the same batch each time it is called.
    """
    params = list(params)
    loss, g1 = _loss_and_grads(params, loss_fn)
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in g1))
    applied = 0.0
    if sam.rho == 0 or norm < 1e-12:
        g2 = g1
    else:
        saved = [p.data for p in params]
        deltas = [(g * (sam.rho / norm)).astype(p.data.dtype) for p, g in zip(params, g1)]
        applied = math.sqrt(sum(float(np.sum(np.square(d, dtype=np.float64))) for d in deltas))
        for p, d in zip(params, deltas):
            p.data = p.data + d
        try:
            _, g2 = _loss_and_grads(params, loss_fn)
        finally:
            for p, s in zip(params, saved):
                p.data = s
    sgd_step(base, params, g2, step)
    zero_grad(params)
    return SamResult(loss, applied)


@dataclass
class AdamwState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(state: AdamwState, params: Sequence[Tensor], grads=None) -> None:
    """Decoupled weight decay, then the bias-corrected Adam update, in place."""
    grads = _grads(params, grads)
    state.step += 1
    b1, b2 = state.betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g in zip(params, grads):
        m = state.m.get(id(p))
        v = state.v.get(id(p))
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[id(p)], state.v[id(p)] = m, v
        w = p.data * (1 - state.lr * state.weight_decay)
        w = w - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = w.astype(p.data.dtype, copy=False)
