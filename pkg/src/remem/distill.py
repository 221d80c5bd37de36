"""Students, distillation losses and trainers, and the best-of-grid evaluation protocol."""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import NumericError, ParameterError, ShapeError
from .nn import linear
from .optim import SgdState, Schedule, sgd_step, zero_grad
from .seeding import derive_seed
from .tensor import Tensor

log = logging.getLogger(__name__)

ALGORITHMS = ("logit_match", "dist", "patient")


class StudentModel:
    """flatten -> linear -> relu -> linear -> relu -> linear."""

    def __init__(self, in_dim: int, n_classes: int, d_hidden: int = 128, seed: int = 0):
        rng = np.random.default_rng(seed)
        dims = [in_dim, d_hidden, d_hidden, n_classes]
        self.params: dict[str, Tensor] = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            # He init keeps the relu stack trainable from scratch
            self.params[f"fc{i}.w"] = T.parameter(rng.normal(0, math.sqrt(2.0 / a), (a, b)), f"fc{i}.w")
            self.params[f"fc{i}.b"] = T.parameter(np.zeros(b), f"fc{i}.b")
        self.in_dim, self.n_classes, self.d_hidden = in_dim, n_classes, d_hidden

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def __call__(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images).reshape(len(images), -1))
        P = self.params
        h = T.relu(linear(x, P["fc0.w"], P["fc0.b"]))
        h = T.relu(linear(h, P["fc1.w"], P["fc1.b"]))
        return linear(h, P["fc2.w"], P["fc2.b"])

    def predict(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        with T.no_grad():
            return np.concatenate([self(images[i:i + batch_size]).data
                                   for i in range(0, len(images), batch_size)])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state) -> None:
        for n, a in state.items():
            self.params[n].data = a.copy()


@dataclass
class KdConfig:
    algorithm: str = "logit_match"
    lam: float = 0.5
    temperature: float = 2.0
    dist_beta: float = 1.0
    dist_gamma: float = 1.0
    mixup_alpha: float = 0.8
    steps: int = 400
    batch_size: int = 64
    lr: float = 0.05
    warmup_steps: int = 20
    momentum: float = 0.9
    weight_decay: float = 1e-4
    eval_every: int = 50
    patient_factor: int = 10

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ParameterError(f"unknown distillation algorithm {self.algorithm!r}")
        _check_lam_t(self.lam, self.temperature)

    @property
    def total_steps(self) -> int:
        return self.steps * (self.patient_factor if self.algorithm == "patient" else 1)

    @property
    def uses_mixup(self) -> bool:
        return self.algorithm == "patient"


def _check_lam_t(lam: float, temperature: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")


def _teacher_logits(teacher_logits) -> np.ndarray:
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if not np.isfinite(t).all():
        raise NumericError("non-finite teacher logits")
    return t


def _softmax_np(z: np.ndarray, t: float) -> np.ndarray:
    z = z / t
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def kd_loss(student_logits: Tensor, teacher_logits, labels, lam: float, temperature: float) -> Tensor:
    """``lam * CE(labels, student) + (1 - lam) * T^2 * KL(p_teacher || p_student)`` at temperature T."""
    _check_lam_t(lam, temperature)
    t_logits = _teacher_logits(teacher_logits)
    if t_logits.shape != student_logits.shape:
        raise ShapeError(f"teacher logits {t_logits.shape} vs student {student_logits.shape}")
    ce = T.cross_entropy(student_logits, labels)
    if lam == 1.0:
        return ce
    p_t = _softmax_np(t_logits.astype(np.float64), temperature).astype(student_logits.data.dtype)
    kl = T.kl_div(p_t, T.softmax(student_logits, temperature))
    kd = kl * (temperature ** 2)
    if lam == 0.0:
        return kd
    return ce * lam + kd * (1.0 - lam)


def _pearson_loss(a: Tensor, b: np.ndarray, axis: int, what: str) -> Tensor:
    """Mean over the other axis of ``1 - corr(a, b)`` along ``axis``.

    A zero-variance slice counts as perfectly correlated.
    """
    n = a.shape[axis]
    bd = b - b.mean(axis=axis, keepdims=True)
    ac = a - T.expand(a.mean(axis=axis, keepdims=True), a.shape)
    dt = a.data.dtype
    cov = (ac * Tensor(bd, dtype=dt)).sum(axis=axis)
    va = (ac * ac).sum(axis=axis)
    vb = (bd * bd).sum(axis=axis)
    degenerate = (va.data <= 1e-24 * n) | (vb <= 1e-24 * n)
    if degenerate.any():
        log.warning("%s: %d zero-variance slice(s) treated as correlation 1", what, int(degenerate.sum()))
    # pad degenerate slices away from sqrt(0) so their (masked) gradient stays finite
    va = va + Tensor(degenerate.astype(dt), dtype=dt)
    sb = np.sqrt(np.where(degenerate, 1.0, vb)).astype(dt)
    corr = cov / (T.sqrt(va) * Tensor(sb, dtype=dt))
    keep = Tensor((~degenerate).astype(dt), dtype=dt)
    return (1.0 - (corr * keep + (1.0 - keep))).mean()


def inter_class_loss(p_student: Tensor, p_teacher) -> Tensor:
    """Mean over samples of ``1 - Pearson(student row, teacher row)``."""
    pt = p_teacher.data if isinstance(p_teacher, Tensor) else np.asarray(p_teacher, dtype=p_student.data.dtype)
    return _pearson_loss(p_student, pt, axis=1, what="inter")


def intra_class_loss(p_student: Tensor, p_teacher) -> Tensor:
    """Mean over classes of ``1 - Pearson(student column, teacher column)``."""
    pt = p_teacher.data if isinstance(p_teacher, Tensor) else np.asarray(p_teacher, dtype=p_student.data.dtype)
    return _pearson_loss(p_student, pt, axis=0, what="intra")


def dist_loss(student_logits: Tensor, teacher_logits, labels, lam: float, beta: float = 1.0,
              gamma: float = 1.0, temperature: float = 1.0) -> Tensor:
    """``(1 - lam) CE + lam (beta L_inter + gamma L_intra)`` on probabilities at temperature T.

    The relation terms carry the usual ``T^2`` factor.
    """
    _check_lam_t(lam, temperature)
    n, k = student_logits.shape
    if n < 2 or k < 2:
        raise ShapeError(f"dist_loss needs batch >= 2 and classes >= 2, got {student_logits.shape}")
    t_logits = _teacher_logits(teacher_logits)
    p_t = _softmax_np(t_logits.astype(np.float64), temperature)
    p_s = T.softmax(student_logits, temperature)
    div = inter_class_loss(p_s, p_t) * beta + intra_class_loss(p_s, p_t) * gamma
    ce = T.cross_entropy(student_logits, labels)
    return ce * (1.0 - lam) + div * (lam * temperature ** 2)


def mixup(images: np.ndarray, labels_onehot: np.ndarray, alpha: float, rng: np.random.Generator,
          lam: float | None = None, perm: np.ndarray | None = None):
    """Convex-combine the batch with a permutation of itself; returns (images, labels, lam)."""
    if not alpha > 0:
        raise ParameterError(f"mixup alpha must be > 0, got {alpha}")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    if perm is None:
        perm = rng.permutation(len(images))
    x = lam * images + (1 - lam) * images[perm]
    y = lam * labels_onehot + (1 - lam) * labels_onehot[perm]
    return x.astype(images.dtype), y.astype(labels_onehot.dtype), lam


TeacherFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class StudentResult:
    final_acc: float
    best_acc: float
    best_step: int
    trace: list = field(default_factory=list)  # (step, train_loss, test_acc or None)
    final_state: dict = field(default_factory=dict)
    best_state: dict = field(default_factory=dict)


def train_student(student: StudentModel, teacher: TeacherFn | None, train: Dataset, test: Dataset,
                  kd: KdConfig, seed: int = 0) -> StudentResult:
    """Distil ``teacher`` (a frozen images -> logits function) into ``student``.

    With ``lam == 1`` (logit matching) the teacher is never queried.
    """
    rng = np.random.default_rng(derive_seed(seed, "student-batches"))
    steps = kd.total_steps
    opt = SgdState(Schedule(kd.lr, min(kd.warmup_steps, steps), steps), kd.momentum, kd.weight_decay)
    params = student.parameters()
    x_all = train.images
    y_all = train.labels
    onehot = np.eye(train.n_classes, dtype=np.float32)[y_all]
    kd_weight = kd.lam if kd.algorithm == "dist" else 1.0 - kd.lam
    needs_teacher = teacher is not None and kd_weight > 0
    cached = teacher(x_all) if needs_teacher and not kd.uses_mixup else None
    test_x = test.images.reshape(len(test), -1)

    result = StudentResult(0.0, -1.0, 0)
    order = rng.permutation(len(y_all))
    cursor = 0
    for step in range(steps):
        if cursor + kd.batch_size > len(order):
            order = rng.permutation(len(y_all))
            cursor = 0
        idx = order[cursor:cursor + kd.batch_size]
        cursor += kd.batch_size
        xb, yb = x_all[idx], y_all[idx]
        target = yb
        if kd.uses_mixup:
            xb, target, _ = mixup(xb, onehot[idx], kd.mixup_alpha, rng)
        if needs_teacher:
            tl = teacher(xb) if cached is None else cached[idx]
        zero_grad(params)
        logits = student(xb.reshape(len(xb), -1))
        if not needs_teacher:
            loss = T.cross_entropy(logits, target)
        elif kd.algorithm == "dist":
            loss = dist_loss(logits, tl, target, kd.lam, kd.dist_beta, kd.dist_gamma, kd.temperature)
        else:
            loss = kd_loss(logits, tl, target, kd.lam, kd.temperature)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite student loss at step {step}")
        T.backward(loss)
        sgd_step(opt, params, step=step + 1)
        acc = None
        if (step + 1) % kd.eval_every == 0 or step + 1 == steps:
            acc = float((student.predict(test_x).argmax(1) == test.labels).mean())
            if acc > result.best_acc:
                result.best_acc, result.best_step = acc, step + 1
                result.best_state = student.state_dict()
        result.trace.append((step + 1, value, acc))
    zero_grad(params)
    result.final_acc = result.trace[-1][2]
    result.final_state = student.state_dict()
    return result


@dataclass
class EvalProtocol:
    """Grid for best-student selection; teachers are keyed by (ckpt_step, teacher_lr)."""

    ckpt_steps: Sequence[int] = (0,)
    teacher_lrs: Sequence[float] = (0.0,)
    student_lrs: Sequence[float] = (0.05,)
    lams: Sequence[float] = (0.5,)
    temperatures: Sequence[float] = (2.0,)

    def __post_init__(self):
        for name in ("ckpt_steps", "teacher_lrs", "student_lrs", "lams", "temperatures"):
            if len(getattr(self, name)) == 0:
                raise ParameterError(f"EvalProtocol.{name} must be non-empty")

    def cells(self) -> list[tuple]:
        return list(itertools.product(self.ckpt_steps, self.teacher_lrs, self.student_lrs,
                                      self.lams, self.temperatures))


GRID_HEADER = ("ckpt_step", "teacher_lr", "student_lr", "lambda", "temperature",
               "teacher_acc", "student_acc", "status")


@dataclass
class TeacherVariant:
    predict: TeacherFn
    accuracy: float


@dataclass
class ProtocolResult:
    rows: list[dict]
    best: dict | None
    failures: list[dict]


def _run_cell(args):
    cell, teacher, train, test, kd_base, d_hidden, seed = args
    ckpt, t_lr, s_lr, lam, temp = cell
    row = dict(zip(GRID_HEADER[:5], cell))
    row["teacher_acc"] = teacher.accuracy
    try:
        kd = KdConfig(**{**kd_base.__dict__, "lr": s_lr, "lam": lam, "temperature": temp})
        student = StudentModel(int(np.prod(train.image_shape)), train.n_classes, d_hidden,
                               seed=derive_seed(seed, "student-init"))
        res = train_student(student, teacher.predict, train, test, kd, seed=seed)
        row["student_acc"] = res.best_acc
        row["status"] = "ok"
    except Exception as exc:  # one bad cell must not sink the sweep
        log.warning("cell %s failed: %s", cell, exc)
        row["student_acc"] = float("nan")
        row["status"] = f"failed: {type(exc).__name__}"
    return row


def run_protocol(protocol: EvalProtocol, teachers: dict, train: Dataset, test: Dataset,
                 kd: KdConfig, seed: int = 0, d_hidden: int = 128, workers: int = 1) -> ProtocolResult:
    """Train one student per grid cell and select the best by student test accuracy.

    Every cell uses the same student seed, so duplicated cells reproduce
    each other and serial and parallel runs agree. Ties go to the earliest cell.
    """
    cells = protocol.cells()
    jobs = []
    for cell in cells:
        key = (cell[0], cell[1])
        if key not in teachers:
            raise ParameterError(f"no teacher for checkpoint {cell[0]} at lr {cell[1]}")
        jobs.append((cell, teachers[key], train, test, kd, d_hidden, seed))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    ok = [r for r in rows if r["status"] == "ok"]
    best = None
    for r in ok:
        if best is None or r["student_acc"] > best["student_acc"]:
            best = r
    return ProtocolResult(rows, best, [r for r in rows if r["status"] != "ok"])
