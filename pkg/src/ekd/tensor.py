"""Reverse-mode automatic differentiation over numpy arrays.

The engine is a gradient tape: while a Tape is active, every differentiable
operation appends one node holding the output tensor and a closure that maps
the output gradient to per-input gradients.  ``backward`` walks the tape once
in reverse order, which is a valid topological order because nodes are
recorded in execution order.

Values are float32 by default.  Arrays that arrive as float64 keep that
precision, which is what ``grad_check`` relies on for central differences.
Broadcasting follows numpy's trailing-dimension rules and gradients are
summed back over broadcast axes.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "relu",
    "gelu",
    "matmul",
    "reshape",
    "transpose",
    "embedding_rows",
    "tensor_sum",
    "tensor_mean",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm_rows",
    "backward",
    "grad_check",
]

DEFAULT_DTYPE = np.float32

_active_tape: "Tape | None" = None


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(DEFAULT_DTYPE, copy=False)


class Tensor:
    """A numpy array plus gradient bookkeeping.

    ``grad`` stays None until ``backward`` deposits something.  Leaf tensors
    are the ones created directly from data; operation outputs are interior
    nodes and never hold gradients themselves.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # Arithmetic sugar.  Scalars are promoted to constant tensors.
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __neg__(self):
        return neg(self)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class _Node:
    __slots__ = ("out", "fn")

    def __init__(self, out: Tensor, fn: Callable[[np.ndarray], list[tuple[Tensor, np.ndarray]]]):
        self.out = out
        self.fn = fn


class Tape:
    """Records one step's operations; used as a context manager."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a tape is already active; nesting tapes is not supported")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = None

    def clear(self) -> None:
        self._nodes.clear()


def _make_out(data: np.ndarray, inputs: Sequence[Tensor], fn) -> Tensor:
    """Wrap op output, recording a node when a tape is active and needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.is_leaf = False
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.tape = None
    tape = _active_tape
    if tape is not None and out.requires_grad:
        out.tape = tape
        tape._nodes.append(_Node(out, fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    for da, db in zip(a.shape[::-1], b.shape[::-1]):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out_data = a.data + b.data

    def backward_fn(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape))]

    return _make_out(out_data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out_data = a.data - b.data

    def backward_fn(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape))]

    return _make_out(out_data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out_data = a.data * b.data

    def backward_fn(g):
        return [
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        ]

    return _make_out(out_data, (a, b), backward_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data, b.data)
    out_data = a.data / b.data

    def backward_fn(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return [(a, ga), (b, gb)]

    return _make_out(out_data, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    def backward_fn(g):
        return [(a, -g)]

    return _make_out(-a.data, (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward_fn(g):
        return [(a, g * out_data)]

    return _make_out(out_data, (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward_fn(g):
        return [(a, g / a.data)]

    return _make_out(out_data, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def backward_fn(g):
        # Subgradient 0 at the kink.
        return [(a, g * (a.data > 0))]

    return _make_out(out_data, (a,), backward_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit.

    The backward pass differentiates the approximation itself, so gradient
    checks against it are exact up to floating point error.
    """
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        dx = 0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
        return [(a, g * dx)]

    return _make_out(out_data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# Matrix multiply and layout
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy leading-dimension broadcasting."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")
    out_data = np.matmul(ad, bd)

    def backward_fn(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return [(a, ga), (b, gb)]

    return _make_out(out_data, (a, b), backward_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old_shape = a.data.shape

    def backward_fn(g):
        return [(a, g.reshape(old_shape))]

    return _make_out(a.data.reshape(shape), (a,), backward_fn)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = np.argsort(axes)

    def backward_fn(g):
        return [(a, g.transpose(inverse))]

    return _make_out(a.data.transpose(axes), (a,), backward_fn)


def embedding_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer index; scatter-add on backward.

    For small row counts the scatter is a one-hot matmul, which beats
    ``np.add.at`` by a wide margin on repeated indices.
    """
    ids = np.asarray(ids)
    out_data = table.data[ids]
    n_rows = table.data.shape[0]

    def backward_fn(g):
        flat_ids = ids.reshape(-1)
        flat_g = g.reshape(flat_ids.size, table.data.shape[-1])
        if n_rows <= 2048:
            onehot = np.zeros((flat_ids.size, n_rows), dtype=g.dtype)
            onehot[np.arange(flat_ids.size), flat_ids] = 1
            gt = onehot.T @ flat_g
        else:
            gt = np.zeros_like(table.data)
            np.add.at(gt, flat_ids, flat_g)
        return [(table, gt)]

    return _make_out(out_data, (table,), backward_fn)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return [(a, np.broadcast_to(g, a.data.shape).copy())]
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(g_exp, a.data.shape).copy())]

    return _make_out(out_data, (a,), backward_fn)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return [(a, np.broadcast_to(g / count, a.data.shape).copy())]
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(g_exp / count, a.data.shape).copy())]

    return _make_out(out_data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# Row-wise softmax and normalization
# ---------------------------------------------------------------------------

def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} received non-finite input")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    _check_finite("softmax_rows", a.data)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return [(a, out_data * (g - dot))]

    return _make_out(out_data, (a,), backward_fn)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Log of softmax over the last axis, computed without forming exp(x) twice."""
    _check_finite("log_softmax_rows", a.data)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - log_z
    soft = np.exp(out_data)

    def backward_fn(g):
        return [(a, g - soft * g.sum(axis=-1, keepdims=True))]

    return _make_out(out_data, (a,), backward_fn)


def layer_norm_rows(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale and shift.

    Variance is the biased (1/n) estimate.  The backward rule folds the mean
    and variance paths into the usual three-term expression.
    """
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm_rows gain/bias must have shape ({d},), got {gain.data.shape} and {bias.data.shape}"
        )
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out_data = x_hat * gain.data + bias.data

    def backward_fn(g):
        g_hat = g * gain.data
        m1 = g_hat.mean(axis=-1, keepdims=True)
        m2 = (g_hat * x_hat).mean(axis=-1, keepdims=True)
        ga = (g_hat - m1 - x_hat * m2) * inv_std
        reduce_axes = tuple(range(g.ndim - 1))
        g_gain = (g * x_hat).sum(axis=reduce_axes)
        g_bias = g.sum(axis=reduce_axes)
        return [(a, ga), (gain, g_gain), (bias, g_bias)]

    return _make_out(out_data, (a, gain, bias), backward_fn)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate gradients of ``loss`` into every reachable leaf tensor.

    Gradients add onto existing ``.grad`` contents, so callers that reuse
    leaves across steps must clear them between updates.  Leaves passed via
    ``params`` are guaranteed a gradient array afterwards (zeros when the
    loss does not depend on them).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    param_list = list(params) if params is not None else []
    tape = loss.tape
    if tape is not None:
        # Pending gradients for interior tensors, keyed by identity.
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(tape._nodes):
            g_out = pending.pop(id(node.out), None)
            if g_out is None:
                continue
            for inp, g_in in node.fn(g_out):
                if not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += g_in
                else:
                    seen = pending.get(id(inp))
                    if seen is None:
                        pending[id(inp)] = g_in
                    else:
                        # Allocate rather than add in place: g_in may alias an
                        # array already handed to another input.
                        pending[id(inp)] = seen + g_in
    for p in param_list:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)


def grad_check(
    fn: Callable[..., Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Compare tape gradients of ``fn(*params)`` with central differences.

    Returns the maximum over all parameter coordinates of
    ``|autodiff - numeric| / max(1, |numeric|)``.  Parameters should be
    float64 leaves; float32 does not have the headroom for ``eps`` this small.
    """
    if not (1e-7 <= eps <= 1e-2):
        raise ContractError(f"grad_check eps must lie in [1e-7, 1e-2], got {eps}")
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ContractError("grad_check parameters must require gradients")
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        p.zero_grad()

    with Tape() as tape:
        out = fn(*params)
        if out.data.size != 1:
            raise ContractError("grad_check target function must return a scalar")
    backward(out, params=params)
    analytic = [p.grad.copy() for p in params]
    tape.clear()

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            f_plus = float(fn(*params).data)
            flat[i] = keep - eps
            f_minus = float(fn(*params).data)
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(g.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
