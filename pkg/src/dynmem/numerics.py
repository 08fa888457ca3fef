"""Dense tensor arithmetic with reverse-mode differentiation on an explicit tape.

Arrays are plain numpy; a :class:`Tensor` wraps one array together with an
optional gradient slot. While a :class:`Tape` is active, every primitive
appends one record (inputs, output, vjp closure) in execution order, and
:func:`grad` replays those records strictly in reverse. With no active tape
the same primitives run as ordinary numpy calls, which is what inference
paths use.

All gradient-checked paths run in float64; float32 is supported for training
loops and is selected by the caller via the dtype of the leaf tensors.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "grad",
    "add",
    "mul",
    "matmul",
    "softmax_rows",
    "rotate_pairs",
    "finite_difference",
]

_GELU_C = math.sqrt(2.0 / math.pi)


class NumericsError(ValueError):
    """Shape or domain violation in a tensor primitive."""


class Tensor:
    """A dense array plus an accumulated-gradient slot.

    ``data`` is always a numpy array in row-major order. ``grad`` is filled by
    :func:`grad` for leaf tensors that participated in the taped computation;
    untouched leaves keep a zero gradient (the gradient of a constant).
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # Operator sugar; constants are lifted to Tensors of matching dtype.
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, mul(_lift(other, self.dtype), _lift(-1.0, self.dtype)))

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, _lift(other, self.dtype))


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class _TapeRecord:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, vjp: Callable):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Rebuilt per forward pass; adjoint replay visits records in exact reverse
    order of recording. Use as a context manager::

        with Tape() as tape:
            loss = ...
        grads = grad(loss, params, tape)
    """

    def __init__(self):
        self.records: list[_TapeRecord] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPES.pop()

    def __len__(self) -> int:
        return len(self.records)


def _record(inputs: tuple[Tensor, ...], output: Tensor, vjp: Callable) -> None:
    if _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1].records.append(_TapeRecord(inputs, output, vjp))


def grad(loss: Tensor, params: Sequence[Tensor], tape: Tape) -> list[np.ndarray]:
    """Return d(loss)/d(param) for each param by reverse tape replay.

    ``loss`` must be a scalar produced under ``tape``. Parameters that never
    entered the computation receive an all-zero gradient.
    """
    if loss.data.size != 1:
        raise NumericsError(f"loss must be scalar, got shape {loss.data.shape}")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        out_bar = adjoint.pop(id(rec.output), None)
        if out_bar is None:
            continue
        for tensor, piece in zip(rec.inputs, rec.vjp(out_bar)):
            if piece is None:
                continue
            key = id(tensor)
            if key in adjoint:
                adjoint[key] = adjoint[key] + piece
            else:
                adjoint[key] = piece
    grads = []
    for p in params:
        g = adjoint.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        p.grad = g
        grads.append(g)
    return grads


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the pre-broadcast operand shape)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    _record(
        (a, b),
        out,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    _record(
        (a, b),
        out,
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, 2-D or batched (leading dims broadcast)."""
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise NumericsError(
            f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    _record((a, b), out, vjp)
    return out


def pow_const(a: Tensor, exponent: float) -> Tensor:
    out = Tensor(a.data**exponent)
    _record((a,), out, lambda g: (g * exponent * a.data ** (exponent - 1.0),))
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    _record((a,), out, lambda g: (g * out.data,))
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    _record((a,), out, lambda g: (g * (1.0 - out.data**2),))
    return out


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU with its analytic derivative."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner),)

    _record((a,), out, vjp)
    return out


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    _record((a,), out, vjp)
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), _lift(1.0 / count, a.dtype))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    _record((a,), out, lambda g: (g.reshape(a.data.shape),))
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.transpose(axes))
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    _record((a,), out, lambda g: (g.transpose(inverse),))
    return out


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    _record(
        tuple(parts),
        out,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; adjoint scatters back into zeros."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(a.data[index])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    _record((a,), out, vjp)
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Row-stabilized softmax along the last axis."""
    if a.data.shape[-1] < 1:
        raise NumericsError("softmax_rows needs a nonempty last axis")
    if not np.all(np.isfinite(a.data)):
        raise NumericsError("softmax_rows input contains non-finite values")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    _record((a,), out, vjp)
    return out


def masked_softmax_rows(scores: Tensor, bias: np.ndarray, scale: float) -> Tensor:
    """softmax(scale * scores + bias) along the last axis.

    ``bias`` is a constant additive mask (0 where allowed, a large negative
    fill where masked) and receives no gradient; fusing it here keeps the
    attention hot path free of full-size constant-adjoint reductions.
    """
    z = scores.data * scale
    z += bias
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    out = Tensor(z)

    def vjp(g):
        dot = (g * z).sum(axis=-1, keepdims=True)
        gx = g - dot
        gx *= z
        gx *= scale
        return (gx,)

    _record((scores,), out, vjp)
    return out


def rotate_pairs(x: Tensor, phase: Tensor) -> Tensor:
    """Rotate consecutive feature pairs of ``x`` by per-band angles.

    ``x[..., 2b]``/``x[..., 2b+1]`` are rotated by ``phase[..., b]``; the
    phase may broadcast over leading axes. Norm-preserving; differentiable in
    both arguments.
    """
    if x.data.shape[-1] % 2 != 0:
        raise NumericsError("rotate_pairs needs an even feature dimension")
    if x.data.shape[-1] != 2 * phase.data.shape[-1]:
        raise NumericsError(
            f"feature dim {x.data.shape[-1]} must equal 2 x bands {phase.data.shape[-1]}"
        )
    cos = np.cos(phase.data)
    sin = np.sin(phase.data)
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    oe = xe * cos - xo * sin
    oo = xe * sin + xo * cos
    out = np.empty(oe.shape[:-1] + (2 * oe.shape[-1],), dtype=oe.dtype)
    out[..., 0::2] = oe
    out[..., 1::2] = oo
    result = Tensor(out)

    def vjp(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        gphase = go * oe - ge * oo
        return _unbroadcast(gx, x.data.shape), _unbroadcast(gphase, phase.data.shape)

    _record((x, phase), result, vjp)
    return result


# ---------------------------------------------------------------------------
# verification helper


def finite_difference(
    f: Callable[[], float],
    array: np.ndarray,
    index: tuple[int, ...],
    step: float = 1e-4,
) -> float:
    """Central finite difference of ``f`` w.r.t. one array coordinate."""
    orig = array[index]
    array[index] = orig + step
    f_plus = f()
    array[index] = orig - step
    f_minus = f()
    array[index] = orig
    return (f_plus - f_minus) / (2.0 * step)
