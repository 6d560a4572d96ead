"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` whenever at least
one input requires a gradient. Outside a tape nothing is recorded, which is
how inference runs::

    with Tape() as tape:
        loss = some_function(params)
        tape.backward(loss)
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A row-major float64 array, optionally tracking gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_record")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._record: Record | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; every one of these routes through a recorded op
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Parameter(Tensor):
    """A trainable tensor with a stable name used for serialization."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps the output gradient to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    index: int = -1


class Tape:
    """Ordered log of recorded operations for one forward pass."""

    def __init__(self):
        self.records: list[Record] = []
        self.cleared = False
        self._previous: Tape | None = None

    def __enter__(self) -> Tape:
        global _ACTIVE
        self._previous = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = self._previous
        self._previous = None

    def __len__(self) -> int:
        return len(self.records)

    def append(self, inputs: tuple[Tensor, ...], output: Tensor, rule) -> None:
        if self.cleared:
            raise TapeError("cannot record onto a cleared tape")
        rec = Record(inputs, output, rule, len(self.records))
        output._record = rec
        self.records.append(rec)

    def clear(self) -> None:
        for rec in self.records:
            rec.output._record = None
        self.records = []
        self.cleared = True

    def owns(self, rec: Record | None) -> bool:
        return (rec is not None and rec.index < len(self.records)
                and self.records[rec.index] is rec)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.cleared:
            raise TapeError("backward on a cleared tape")
        if loss.data.size != 1 or loss.ndim > 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        top = loss._record
        if not self.owns(top):
            raise TapeError("loss was not produced on this tape")

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records[: top.index + 1]):
            g = pending.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if self.owns(inp._record):
                    key = id(inp)
                    pending[key] = pending[key] + gi if key in pending else gi
                elif inp.grad is None:
                    inp.grad = np.array(gi, dtype=DTYPE)
                else:
                    inp.grad += gi


_ACTIVE: Tape | None = None


def active_tape() -> Tape | None:
    return _ACTIVE


@contextmanager
def no_record():
    """Suspend recording, e.g. for decoding inside a training step."""
    global _ACTIVE
    saved, _ACTIVE = _ACTIVE, None
    try:
        yield
    finally:
        _ACTIVE = saved


def backward(loss: Tensor) -> None:
    """Run reverse mode on the active tape, which must have produced ``loss``."""
    if _ACTIVE is None:
        raise TapeError("backward needs an active tape")
    _ACTIVE.backward(loss)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(data)
    if _ACTIVE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE.append(inputs, out, rule)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: (g,))


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array of the same shape (masks, dropout)."""
    c = np.asarray(c, dtype=DTYPE)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: shapes {a.shape} and {c.shape} differ")
    return _make(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Pick ``a`` where ``cond`` holds, else ``b``; ``cond`` must match the shape."""
    _same_shape("where", a, b)
    cond = np.asarray(cond, dtype=bool)
    if cond.shape != a.shape:
        raise ShapeError(f"where: condition shape {cond.shape} vs {a.shape}")
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of ``a`` (explicit row broadcast)."""
    if b.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: {a.shape} and {b.shape}")
    lead = tuple(range(a.ndim - 1))
    return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit broadcast; size-1 axes of ``a`` are repeated, new axes prepended."""
    shape = tuple(shape)
    if len(shape) < a.ndim:
        raise ShapeError(f"broadcast_to: cannot shrink {a.shape} to {shape}")
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as err:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from err
    src = a.shape
    extra = len(shape) - len(src)

    def rule(g):
        g = g.sum(axis=tuple(range(extra))) if extra else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and shape[i + extra] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _make(out.copy(), (a,), rule)


# ------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [B,m,k] x [B,k,n] -> [B,m,n]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b),
                 lambda g: (g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes).copy(), (a,), lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: {src} -> {shape}") from err
    return _make(out, (a,), lambda g: (g.reshape(src),))


# ------------------------------------------------------- structure and gather

def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last (feature) axis."""
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: leading extents differ, {a.shape} vs {b.shape}")
    k = a.shape[-1]
    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b),
                 lambda g: (g[..., :k], g[..., k:]))


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not items:
        raise ShapeError("stack: nothing to stack")
    first = items[0].shape
    for t in items:
        if t.shape != first:
            raise ShapeError(f"stack: shapes {first} and {t.shape} differ")
    out = np.stack([t.data for t in items], axis=axis)
    n = len(items)
    return _make(out, tuple(items),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def take(a: Tensor, index) -> Tensor:
    """Numpy-style indexing (basic or advanced) with scatter-add backward."""
    src = a.shape
    out = np.array(a.data[index], dtype=DTYPE, copy=True)

    def rule(g):
        full = np.zeros(src, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), rule)


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    src = a.shape
    out = np.asarray(np.sum(a.data, axis=axis), dtype=DTYPE)

    def rule(g):
        if axis is None:
            return (np.full(src, np.reshape(g, ()), dtype=DTYPE),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(out, (a,), rule)


# --------------------------------------------------------- normalising kernels

def logsumexp(a: Tensor, axis: int | None = None) -> Tensor:
    """log(sum(exp(a))) along ``axis`` (all elements when None), max-shifted."""
    x = a.data
    if x.size == 0 or (axis is not None and x.shape[axis] == 0):
        raise ShapeError("logsumexp of an empty input")
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True)
    w = e / s
    out = m + np.log(s)
    out = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)

    def rule(g):
        gk = np.reshape(g, (1,) * x.ndim) if axis is None else np.expand_dims(g, axis)
        return (gk * w,)

    return _make(np.asarray(out, dtype=DTYPE), (a,), rule)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis, restricted to positions where ``mask`` holds.

    Masked outputs are exactly zero. Every row needs one unmasked entry.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs scores {scores.shape}")
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has every position masked")
    x = np.where(mask, scores.data, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.where(mask, np.exp(x - m), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p, (scores,), rule)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul_const(a, keep)


def numerical_gradient(f: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``t``."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
