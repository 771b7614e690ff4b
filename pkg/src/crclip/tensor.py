"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records itself on the module-level tape when at least one input
requires a gradient. ``backward`` replays the tape in reverse, accumulating
gradients additively on fan-out, and clears it afterwards.

Binary elementwise ops follow numpy broadcasting; the backward pass sums the
incoming gradient back down to each operand's shape.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NonFiniteError

DTYPE = np.float64

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation.

    Leaves (tensors built directly by the caller) own a ``grad`` buffer when
    ``requires_grad`` is set. Tensors produced by ops receive their gradient
    during ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.name = name
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.is_leaf = False
        out.name = None
        out.grad = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeRecord:
    op: str
    out: Tensor
    inputs: tuple
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of differentiable ops. Inputs always precede outputs."""

    records: list = field(default_factory=list)
    enabled: bool = True

    def record(self, op: str, out: Tensor, inputs: tuple, backward: BackwardFn) -> None:
        self.records.append(TapeRecord(op, out, inputs, backward))

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them (evaluation passes)."""
    previous = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = previous


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: tuple, backward: BackwardFn) -> Tensor:
    needs = _TAPE.enabled and any(t.requires_grad for t in inputs)
    out = Tensor._result(data, needs)
    if needs:
        _TAPE.record(op, out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _check_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for a {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that does not require grad")

    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        loss.grad = loss.grad + seed
        _TAPE.clear()
        return
    if not _TAPE.records:
        raise ContractError("backward called with an empty tape")

    pending = {id(loss): seed}
    for rec in reversed(_TAPE.records):
        g = pending.pop(id(rec.out), None)
        if g is None:
            continue
        rec.out.grad = g
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad = t.grad + gi
            else:
                key = id(t)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
    _TAPE.clear()


def first_non_finite() -> Optional[str]:
    """Describe the earliest taped op whose output holds NaN/Inf, if any."""
    for pos, rec in enumerate(_TAPE.records):
        if not np.all(np.isfinite(rec.out.data)):
            return f"output of op '{rec.op}' (tape position {pos}, shape {rec.out.shape})"
    return None


def assert_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{what} contains non-finite values")


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be 2-d and shared."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    A, B = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _emit("matmul", A @ B, (a, b), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _emit("reshape", data, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", data, tensors, bw)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (embedding lookup, token pooling)."""
    axis = _check_axis("take", axis, x.ndim)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
        raise DimensionError(f"take: index out of range for axis of size {x.shape[axis]}")
    src_shape = x.shape

    def bw(g):
        out = np.zeros(src_shape, dtype=DTYPE)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, list(range(axis, axis + idx.ndim)),
                                          list(range(idx.ndim))))
        return (out,)

    return _emit("take", np.take(x.data, idx, axis=axis), (x,), bw)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    A, B = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * B, A.shape) if a.requires_grad else None
        gb = _unbroadcast(g * A, B.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", A * B, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def log1p(x: Tensor) -> Tensor:
    X = x.data
    return _emit("log1p", np.log1p(X), (x,), lambda g: (g / (1.0 + X),))


def sigmoid(x: Tensor) -> Tensor:
    X = x.data
    # split by sign so neither branch overflows
    y = np.empty_like(X)
    pos = X >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-X[pos]))
    ex = np.exp(X[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    X = x.data
    return _emit("relu", np.maximum(X, 0.0), (x,), lambda g: (g * (X > 0),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), using erf rather than the tanh approximation."""
    X = x.data
    cdf = 0.5 * (1.0 + erf(X / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * X * X)
        return (g * (cdf + X * pdf),)

    return _emit("gelu", X * cdf, (x,), bw)


# ---------------------------------------------------------------------------
# Reductions and normalisation
# ---------------------------------------------------------------------------

def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape
    if axis is not None:
        axis = _check_axis("sum", axis, x.ndim)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    src = x.shape
    if axis is not None:
        axis = _check_axis("mean", axis, x.ndim)
    n = x.data.size if axis is None else src[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return _emit("mean", np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("softmax", axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + bias``."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    D = x.shape[-1]
    if gain.shape != (D,) or bias.shape != (D,):
        raise DimensionError(
            f"layer_norm: feature size {D} vs gain {gain.shape} / bias {bias.shape}")
    X, G = x.data, gain.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    lead = tuple(range(X.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * G
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gg, gb

    return _emit("layer_norm", xhat * G + bias.data, (x, gain, bias), bw)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row (last axis) by max(||row||, eps); zero rows stay zero."""
    if eps <= 0:
        raise ContractError(f"l2_normalize eps must be positive, got {eps}")
    X = x.data
    norm = np.sqrt((X * X).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = X / denom
    active = norm > eps

    def bw(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(active, g - y * proj, g) / denom,)

    return _emit("l2_normalize", y, (x,), bw)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an explicit generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", x.data * keep, (x,), lambda g: (g * keep,))
