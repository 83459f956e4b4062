"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in C-contiguous numpy arrays of 64-bit floats. Operations
executed while a tape is active are recorded, and `backward` replays the
tape in reverse to populate `.grad` on every tensor that requires
gradients. Any operation producing a NaN/Inf raises immediately; nothing
non-finite ever propagates.

A tape is confined to one thread; tensors themselves are plain values and
may be shared across threads for read-only use.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    """Raised when an operation produces NaN or Inf."""


def _ensure_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _ensure_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class TapeEntry(NamedTuple):
    inputs: tuple
    output: Tensor
    backward: Callable  # grad_out -> tuple of grads aligned with inputs (None allowed)
    op: str


class ComputationTape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __len__(self):
        return len(self.entries)


_STATE = threading.local()


def active_tape() -> Optional[ComputationTape]:
    return getattr(_STATE, "stack", None)[-1] if getattr(_STATE, "stack", None) else None


@contextmanager
def tape():
    """Record operations on a fresh tape for the duration of the context."""
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
    t = ComputationTape()
    _STATE.stack.append(t)
    try:
        yield t
    finally:
        _STATE.stack.pop()


def _out(data: np.ndarray, inputs: Sequence[Tensor], backward, op: str) -> Tensor:
    _ensure_finite(data, op)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = any(x.requires_grad for x in inputs)
    t.grad = None
    t.name = None
    tp = active_tape()
    if tp is not None and t.requires_grad:
        tp.entries.append(TapeEntry(tuple(inputs), t, backward, op))
    return t


def backward(loss: Tensor, tp: ComputationTape) -> None:
    """Populate `.grad` on every requires_grad tensor reachable from `loss`.

    Repeated calls without zeroing accumulate into existing grads.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(e.output is loss for e in tp.entries):
        raise TensorError("loss is not on the tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(tp.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        in_grads = entry.backward(g)
        for x, gx in zip(entry.inputs, in_grads):
            if gx is None or not x.requires_grad:
                continue
            key = id(x)
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = gx
            touched[key] = x
    for key, t in touched.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.ascontiguousarray(g, dtype=np.float64)
        _ensure_finite(g, f"gradient of {t.name or 'tensor'}")
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def const(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _out(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _out(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _out(a.data * b.data, (a, b), bwd, "mul")


def neg(a: Tensor) -> Tensor:
    return _out(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _out(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    if b.data.ndim == 2 and a.data.ndim > 2:
        # Stacked projection: collapse the batch axes into one GEMM.
        kdim, n = b.shape
        a2 = a.data.reshape(-1, kdim)

        def bwd(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _out((a2 @ b.data).reshape(a.shape[:-1] + (n,)), (a, b),
                    bwd, "matmul")

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _out(np.matmul(a.data, b.data), (a, b), bwd, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _out(np.ascontiguousarray(a.data.reshape(shape)), (a,), bwd, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _out(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd, "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _out(np.concatenate([t.data for t in tensors], axis=axis),
                tensors, bwd, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"slice [{start}:{start + length}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _out(np.ascontiguousarray(a.data[idx]), (a,), bwd, "slice")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _out(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bwd, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _out(a.data * s, (a,), bwd, "silu")


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _out(y, (x,), bwd, "softmax")


RMSNORM_EPS = 1e-6


def rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError(f"rmsnorm gain shape {gain.shape} != ({d},)")
    r = np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + RMSNORM_EPS)
    xn = x.data / r

    def bwd(g):
        gg = g * gain.data
        # d/dx of x / rms(x): remove the component along x scaled by 1/(d r^2)
        proj = (gg * x.data).sum(axis=-1, keepdims=True)
        gx = gg / r - x.data * proj / (d * r**3)
        ggain = (g * xn).reshape(-1, d).sum(axis=0)
        return gx, ggain

    return _out(xn * gain.data, (x, gain), bwd, "rmsnorm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError("embedding id out of range")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _out(table.data[ids], (table,), bwd, "embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row cross entropy from raw logits; logits shape (N, V), targets (N,)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, V) logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    losses = lse - z[rows, targets]
    probs = np.exp(z - lse[:, None])

    def bwd(g):
        gl = probs * g[:, None]
        gl[rows, targets] -= g
        return (gl,)

    return _out(losses, (logits,), bwd, "cross_entropy")


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position rotation over the last axis (paired half-splitting).

    x: (..., L, hd) with hd even; cos/sin: broadcastable to (..., L, hd // 2).
    """
    hd = x.shape[-1]
    if hd % 2:
        raise ShapeError(f"rope needs an even head dim, got {hd}")
    h = hd // 2
    x1, x2 = x.data[..., :h], x.data[..., h:]
    y = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def bwd(g):
        g1, g2 = g[..., :h], g[..., h:]
        return (np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1),)

    return _out(y, (x,), bwd, "rope")


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
