"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable op records itself with a monotonically increasing
sequence number; ``backward`` replays the recorded ops in exact reverse
order. Shapes must match exactly for elementwise ops; the only implicit
broadcast is multiplication/addition by a python scalar. Use ``expand`` to
broadcast explicitly.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ParameterError, ShapeError, UsageError

_seq = itertools.count()
_grad_enabled = True
_dtype = np.float32


def default_dtype():
    return _dtype


def set_default_dtype(dtype) -> None:
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dtype}")
    _dtype = dtype


@contextlib.contextmanager
def precision64():
    """64-bit mode for gradient checks."""
    global _dtype
    prev = _dtype
    _dtype = np.float64
    try:
        yield
    finally:
        _dtype = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f" or arr.dtype.type is not _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def relu(self):
        return relu(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._seq = next(_seq)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``root``.

    Gradients accumulate into existing ``.grad`` buffers.
    """
    if root.data.size != 1 or root.ndim > 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("backward root is not on the tape (no input requires grad)")

    nodes: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = np.array(g) if t.grad is None else t.grad + g
            continue
        t.grad = g if t.grad is None else t.grad + g
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            acc = pending.get(id(parent))
            pending[id(parent)] = pg if acc is None else acc + pg


# -- elementwise ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    return _record(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _record(out, (a,), lambda g: (g * (out > 0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2 * g * ad,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- linear algebra and shape ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]``; leading dims must be identical."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record(ad @ bd, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    src_shape, dt = a.shape, a.data.dtype

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros(src_shape, dtype=dt)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of ``a`` to ``shape`` (numpy rules); backward sums."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}") from exc
    src = a.shape
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(i + lead for i, s in enumerate(src) if s == 1 and shape[i + lead] != 1)

    def bw(g):
        return (g.sum(axis=axes).reshape(src),)

    return _record(out, (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# -- normalisation and probabilities ---------------------------------------

def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    _check_temperature(temperature)
    z = x.data / x.data.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((out * (g - (g * out).sum(axis=axis, keepdims=True))) / temperature,)

    return _record(out, (x,), bw)


def log_softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    _check_temperature(temperature)
    z = x.data / x.data.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def bw(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _record(out, (x,), bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain/bias {gain.shape}/{bias.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    red = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record(out, (x, gain, bias), bw)


# -- losses -------------------------------------------------------------------

def _soft_targets(target, n: int, k: int, dtype) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.ndim == 1:
        if not np.issubdtype(t.dtype, np.integer):
            raise ShapeError("cross_entropy: 1-D targets must be integer labels")
        if t.shape[0] != n:
            raise ShapeError(f"cross_entropy: {t.shape[0]} labels for batch of {n}")
        if t.size and (t.min() < 0 or t.max() >= k):
            raise DomainError(f"cross_entropy: labels outside [0, {k})")
        onehot = np.zeros((n, k), dtype=dtype)
        onehot[np.arange(n), t] = 1
        return onehot
    if t.shape != (n, k):
        raise ShapeError(f"cross_entropy: soft targets {t.shape} vs logits {(n, k)}")
    return t.astype(dtype, copy=False)


def cross_entropy(logits: Tensor, target, temperature: float = 1.0) -> Tensor:
    """Mean cross-entropy; ``target`` is integer labels or a row-stochastic matrix."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects batch x classes logits, got {logits.shape}")
    n, k = logits.shape
    t = _soft_targets(target, n, k, logits.data.dtype)
    lp = log_softmax(logits, temperature)
    return scale(tsum(mul(lp, Tensor(t, dtype=lp.data.dtype))), -1.0 / n)


def kl_div(p, q: Tensor) -> Tensor:
    """Batch-mean KL(p || q) over rows of probabilities, with 0 ln 0 := 0.

    ``p`` is treated as a fixed target when it is not a Tensor that requires grad.
    """
    p = as_tensor(p)
    _same_shape("kl_div", p, q)
    pd, qd = p.data, q.data
    if (pd < 0).any() or (qd < 0).any():
        raise DomainError("kl_div: negative probability")
    n = pd.shape[0] if pd.ndim > 1 else 1
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pd > 0, pd * (np.log(pd) - np.log(qd)), 0.0)
        out = np.asarray(terms.sum() / n, dtype=pd.dtype)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gp = np.where(pd > 0, np.log(pd) - np.log(qd) + 1, 0.0) * g / n
            gq = np.where(pd > 0, -pd / qd, 0.0) * g / n
        return gp.astype(pd.dtype), gq.astype(qd.dtype)

    return _record(out, (p, q), bw)


def bce(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy over all entries; predictions must lie in [0, 1]."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"bce: shape mismatch {pred.shape} vs {t.shape}")
    pd = pred.data
    if (pd < 0).any() or (pd > 1).any() or (t < 0).any() or (t > 1).any():
        raise DomainError("bce: values outside [0, 1]")
    tiny = np.finfo(pd.dtype).tiny
    p = np.clip(pd, tiny, 1 - np.finfo(pd.dtype).epsneg)
    n = pd.size
    out = np.asarray(-(t * np.log(p) + (1 - t) * np.log1p(-p)).sum() / n, dtype=pd.dtype)
    return _record(out, (pred,), lambda g: ((g * (p - t) / (p * (1 - p)) / n).astype(pd.dtype),))


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Numerically stable ``bce(sigmoid(logits), target)``."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce: shape mismatch {logits.shape} vs {t.shape}")
    z = logits.data
    n = z.size
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(loss.sum() / n, dtype=z.dtype)
    return _record(out, (logits,), lambda g: ((g * (_sigmoid(z) - t) / n).astype(z.dtype),))


# -- validation ------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Largest relative error between autodiff and central differences.

    ``f`` recomputes a scalar loss from the current contents of ``params``.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Parameters must be float64.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise UsageError("grad_check requires float64 parameters (use precision64())")
        p.grad = None
    backward(f())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                a = analytic.reshape(-1)[i]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
    return worst
