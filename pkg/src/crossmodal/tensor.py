"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. While a :class:`GradTape` is active,
every differentiable operation appends a backward closure to the tape;
``tape.backward(loss)`` replays those closures in reverse execution order and
accumulates gradients into every tensor that has ``requires_grad`` set.

Conventions used throughout the package:

* row-major data, time-major sequences (frames are rows),
* float64 by default (finite-difference checks need doubles); float32 is
  accepted for faster training runs,
* gradient accumulation is additive — callers zero grads between steps,
* no general broadcasting: binary ops take equal shapes or a python scalar,
  and the few vector/row broadcasts a network needs are explicit named ops
  (``bias_add``, ``channel_scale``, ``row_shift``, ``row_scale``).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy import special as _special

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "add",
    "backward",
    "bias_add",
    "channel_scale",
    "concat",
    "exp",
    "gelu",
    "log",
    "mask_mul",
    "matmul",
    "mean",
    "mul",
    "narrow",
    "reciprocal",
    "reduce_max",
    "relu",
    "reshape",
    "row_scale",
    "row_shift",
    "scale",
    "sigmoid",
    "softmax",
    "split",
    "sqrt",
    "sub",
    "sum",
    "take_rows",
    "tanh",
    "transpose",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """A dense n-dimensional array that can participate in gradients.

    ``grad`` is allocated (as zeros) iff ``requires_grad`` is true and always
    has the same shape and dtype as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy)."""
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small operator sugar; everything routes through the module-level ops.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class GradTape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around the forward pass, then call
    :meth:`backward` on a scalar loss. Recording is thread-local, so
    forward passes without an active tape (e.g. concurrent eval) incur no
    recording cost and no shared state.
    """

    def __init__(self):
        # (output, inputs, fn) where fn(dout) -> per-input grads (None allowed)
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._ops)

    def __enter__(self) -> "GradTape":
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _pop_tape(self)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor.

        Repeated calls accumulate additively. Operations not on the path
        from the loss are skipped.
        """
        if loss.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, fn in reversed(self._ops):
            dout = acc.pop(id(out), None)
            if dout is None:
                continue
            holders.pop(id(out), None)
            if out.requires_grad and out.grad is not None:
                out.grad += dout
            grads = fn(dout)
            for tin, g in zip(inputs, grads):
                if g is None:
                    continue
                prev = acc.get(id(tin))
                acc[id(tin)] = g if prev is None else prev + g
                holders[id(tin)] = tin
        for tid, g in acc.items():
            t = holders[tid]
            if t.requires_grad:
                t.grad += g


_LOCAL = threading.local()


def _tape_stack() -> list[GradTape]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _push_tape(tape: GradTape) -> None:
    _tape_stack().append(tape)


def _pop_tape(tape: GradTape) -> None:
    stack = _tape_stack()
    if not stack or stack[-1] is not tape:
        raise RuntimeError("GradTape exited out of order")
    stack.pop()


def _active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording ``backward_fn`` on the active tape.

    ``backward_fn(dout)`` must return one gradient array (or None) per input,
    in order. If no tape is active or no input requires grad, nothing is
    recorded and the result does not require grad.
    """
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape._ops.append((out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor, tape: GradTape) -> None:
    """Free-function form of :meth:`GradTape.backward`."""
    tape.backward(loss)


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D, or stacked (equal leading batch dims)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def back(dout):
        da = dout @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ dout
        return da, db

    return record(out, (a, b), back)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes (reverses them when ``axes`` is None)."""
    out = np.transpose(x.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def back(dout):
        return (np.transpose(dout, inv),)

    return record(np.ascontiguousarray(out), (x,), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = x.shape
    out = x.data.reshape(shape)

    def back(dout):
        return (dout.reshape(in_shape),)

    return record(out, (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; backward routes gradient slices to sources."""
    if not tensors:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(
            f"concat shape mismatch along axis {axis}: "
            f"{[t.shape for t in tensors]}"
        ) from e
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(dout):
        return tuple(np.split(dout, splits, axis=axis))

    return record(out, tuple(tensors), back)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of {x.shape}"
        )
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx]

    def back(dout):
        dx = np.zeros_like(x.data)
        dx[idx] = dout
        return (dx,)

    return record(np.ascontiguousarray(out), (x,), back)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Inverse of :func:`concat` for the given slice sizes."""
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover axis {axis} of {x.shape}")
    parts = []
    offset = 0
    for s in sizes:
        parts.append(narrow(x, axis, offset, s))
        offset += s
    return parts


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; index -1 yields a zero row.

    Backward scatter-adds, so repeated indices accumulate correctly.
    """
    if x.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    valid = idx >= 0
    out = x.data[np.where(valid, idx, 0)]
    if not valid.all():
        out = out.copy()
        out[~valid] = 0.0

    def back(dout):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx[valid], dout[valid])
        return (dx,)

    return record(out, (x,), back)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax along ``axis``; masked positions get exactly 0.

    ``mask`` is a boolean array broadcastable to ``x`` marking valid entries.
    A slice with no valid entry is an error (degenerate attention).
    """
    data = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: a slice has no valid (unmasked) entries")
        neg = np.full_like(data, -np.inf)
        data = np.where(mask, data, neg)
    m = data.max(axis=axis, keepdims=True)
    e = np.exp(data - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(dout):
        dot = (dout * out).sum(axis=axis, keepdims=True)
        return (out * (dout - dot),)

    return record(out, (x,), back)


# -- elementwise ------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def back(dout):
        return (dout * (x.data > 0),)

    return record(out, (x,), back)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    cdf = 0.5 * (1.0 + _special.erf(x.data * inv_sqrt2))
    out = x.data * cdf

    def back(dout):
        pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
        return (dout * (cdf + x.data * pdf),)

    return record(out, (x,), back)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def back(dout):
        return (dout * (1.0 - out * out),)

    return record(out, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    out = _special.expit(x.data)

    def back(dout):
        return (dout * out * (1.0 - out),)

    return record(out, (x,), back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def back(dout):
        return (dout * out,)

    return record(out, (x,), back)


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise ValueError("log of non-positive input")
    out = np.log(x.data)

    def back(dout):
        return (dout / x.data,)

    return record(out, (x,), back)


def sqrt(x: Tensor) -> Tensor:
    if (x.data < 0).any():
        raise ValueError("sqrt of negative input")
    out = np.sqrt(x.data)

    def back(dout):
        return (dout / (2.0 * out),)

    return record(out, (x,), back)


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data

    def back(dout):
        return (-dout * out * out,)

    return record(out, (x,), back)


def _as_pair(a: Tensor, b, op: str):
    """Validate binary operands: equal shapes, or b a python scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")
        return b, False
    return float(b), True


def add(a: Tensor, b) -> Tensor:
    b, is_scalar = _as_pair(a, b, "add")
    if is_scalar:
        out = a.data + b
        return record(out, (a,), lambda dout: (dout,))
    out = a.data + b.data
    return record(out, (a, b), lambda dout: (dout, dout))


def sub(a: Tensor, b) -> Tensor:
    b, is_scalar = _as_pair(a, b, "sub")
    if is_scalar:
        out = a.data - b
        return record(out, (a,), lambda dout: (dout,))
    out = a.data - b.data
    return record(out, (a, b), lambda dout: (dout, -dout))


def mul(a: Tensor, b) -> Tensor:
    b, is_scalar = _as_pair(a, b, "mul")
    if is_scalar:
        out = a.data * b
        return record(out, (a,), lambda dout: (dout * b,))
    out = a.data * b.data

    def back(dout):
        return dout * b.data, dout * a.data

    return record(out, (a, b), back)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def back(dout):
        return (dout * c,)

    return record(out, (x,), back)


def mask_mul(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array (numpy broadcasting); not differentiable in ``mask``.

    The broadcast must not expand ``x`` — the result keeps x's shape.
    """
    mask = np.asarray(mask)
    out = x.data * mask
    if out.shape != x.shape:
        raise ShapeError(f"mask_mul: mask {mask.shape} expands input {x.shape}")

    def back(dout):
        return (dout * mask,)

    return record(out, (x,), back)


# -- vector broadcasts a network actually needs ------------------------------

def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis: out[..., c] = x[..., c] + b[c]."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match last axis of {x.shape}")
    out = x.data + b.data

    def back(dout):
        axes = tuple(range(dout.ndim - 1))
        return dout, dout.sum(axis=axes)

    return record(out, (x, b), back)


def channel_scale(x: Tensor, g: Tensor) -> Tensor:
    """Multiply by a vector along the last axis: out[..., c] = x[..., c] * g[c]."""
    if g.ndim != 1 or g.shape[0] != x.shape[-1]:
        raise ShapeError(f"channel_scale: gain {g.shape} does not match last axis of {x.shape}")
    out = x.data * g.data

    def back(dout):
        axes = tuple(range(dout.ndim - 1))
        return dout * g.data, (dout * x.data).sum(axis=axes)

    return record(out, (x, g), back)


def row_shift(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-row scalar to a 2-D tensor: out[r, c] = x[r, c] + v[r]."""
    if x.ndim != 2 or v.ndim != 1 or v.shape[0] != x.shape[0]:
        raise ShapeError(f"row_shift: {v.shape} does not match rows of {x.shape}")
    out = x.data + v.data[:, None]

    def back(dout):
        return dout, dout.sum(axis=1)

    return record(out, (x, v), back)


def row_scale(x: Tensor, v: Tensor) -> Tensor:
    """Multiply each row of a 2-D tensor by a per-row scalar."""
    if x.ndim != 2 or v.ndim != 1 or v.shape[0] != x.shape[0]:
        raise ShapeError(f"row_scale: {v.shape} does not match rows of {x.shape}")
    out = x.data * v.data[:, None]

    def back(dout):
        return dout * v.data[:, None], (dout * x.data).sum(axis=1)

    return record(out, (x, v), back)


# -- reductions ---------------------------------------------------------------

def _check_axis(x: Tensor, axis: int | None) -> None:
    if axis is not None:
        if not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
        if x.shape[axis] == 0:
            raise ValueError(f"reduction over empty axis {axis} of shape {x.shape}")
    elif x.size == 0:
        raise ValueError("reduction over an empty tensor")


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    _check_axis(x, axis)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(dout):
        if axis is None:
            return (np.broadcast_to(dout, x.shape).copy(),)
        d = dout if keepdims else np.expand_dims(dout, axis)
        return (np.broadcast_to(d, x.shape).copy(),)

    return record(out, (x,), back)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    _check_axis(x, axis)
    n = x.size if axis is None else x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def back(dout):
        if axis is None:
            return (np.broadcast_to(dout / n, x.shape).copy(),)
        d = dout if keepdims else np.expand_dims(dout, axis)
        return (np.broadcast_to(d / n, x.shape).copy(),)

    return record(out, (x,), back)


def reduce_max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along an axis; gradient routes to the first argmax of each slice."""
    _check_axis(x, axis)
    out = x.data.max(axis=axis, keepdims=keepdims)
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)

    def back(dout):
        d = dout if keepdims else np.expand_dims(dout, axis)
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, arg, d, axis=axis)
        return (dx,)

    return record(out, (x,), back)
