"""Reverse-mode autodiff over numpy arrays.

A deliberately small, closed primitive set; every differentiable computation
in the package is composed from it so the finite-difference checker covers
everything. Tensors are dense numpy arrays plus a gradient slot. A Tape
records primitive applications for one forward pass and is confined to a
single thread; independent tapes may run concurrently on different threads.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, DimensionError, NumericError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Dense array with an optional gradient. Construction records nothing."""

    __slots__ = ("values", "grad", "requires_grad", "tape")

    def __init__(self, values, requires_grad=False, dtype=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.values = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad})"


_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of primitive applications; use as a context manager."""

    __slots__ = ("_records",)

    def __init__(self):
        self._records = []

    def __enter__(self):
        if _active_tape() is not None:
            raise ContractError("Tape: tapes do not nest within one thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def __len__(self):
        return len(self._records)


def constant(values, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=False, dtype=dtype)


def detach(t: Tensor) -> Tensor:
    """Copy of t cut off from the tape; gradients stop here."""
    return Tensor(t.values.copy(), requires_grad=False)


# --- broadcasting -----------------------------------------------------------
# Elementwise binary ops broadcast only over leading (batch) axes: the smaller
# shape must equal the trailing dims of the larger one. Scalars always align.


def _check_suffix(kind, sa, sb):
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise DimensionError(f"{kind}: shapes {sa} and {sb} do not align "
                             "(broadcast only over leading batch axes)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


# --- primitive forward/backward pairs ---------------------------------------
# Each returns (out_values, backward) with backward(gout) -> per-input grads.


def _p_matmul(a, b):
    A, B = a.values, b.values
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {A.shape} and {B.shape}")
    with np.errstate(invalid="ignore", over="ignore"):
        out = A @ B

    def back(g):
        return g @ B.T, A.T @ g

    return out, back


def _p_add(a, b):
    A, B = a.values, b.values
    _check_suffix("add", A.shape, B.shape)
    out = A + B

    def back(g):
        return _unbroadcast(g, A.shape), _unbroadcast(g, B.shape)

    return out, back


def _p_elementwise_mul(a, b):
    A, B = a.values, b.values
    _check_suffix("elementwise_mul", A.shape, B.shape)
    out = A * B

    def back(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return out, back


def _p_div(a, b):
    A, B = a.values, b.values
    _check_suffix("div", A.shape, B.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = A / B

    def back(g):
        return _unbroadcast(g / B, A.shape), _unbroadcast(-g * A / (B * B), B.shape)

    return out, back


def _p_concat(*inputs, axis=0):
    arrs = [t.values for t in inputs]
    nd = arrs[0].ndim
    ref = list(arrs[0].shape)
    for a in arrs[1:]:
        other = list(a.shape)
        if a.ndim != nd or other[:axis] + other[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise DimensionError(f"concat: shapes {[x.shape for x in arrs]} differ off axis {axis}")
    out = np.concatenate(arrs, axis=axis)
    sizes = [a.shape[axis] for a in arrs]

    def back(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return out, back


def _p_slice(x, axis=0, start=0, stop=None):
    v = x.values
    if not (0 <= axis < v.ndim):
        raise DimensionError(f"slice: axis {axis} out of range for shape {v.shape}")
    stop = v.shape[axis] if stop is None else stop
    if not (0 <= start < stop <= v.shape[axis]):
        raise DimensionError(f"slice: bad range [{start}:{stop}] on axis {axis} of {v.shape}")
    idx = (slice(None),) * axis + (slice(start, stop),)
    out = v[idx]

    def back(g):
        full = np.zeros_like(v)
        full[idx] = g
        return (full,)

    return out, back


def _p_sigmoid(x):
    v = x.values
    e = np.exp(-np.abs(v))  # stable both tails
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def back(g):
        return (g * out * (1.0 - out),)

    return out, back


def _p_tanh(x):
    out = np.tanh(x.values)

    def back(g):
        return (g * (1.0 - out * out),)

    return out, back


def _p_relu(x):
    v = x.values
    out = np.maximum(v, 0)

    def back(g):
        # gradient at exactly 0 is defined as 0
        return (g * (v > 0),)

    return out, back


def _p_square(x):
    v = x.values
    out = v * v

    def back(g):
        return (2.0 * v * g,)

    return out, back


def _p_log(x):
    v = x.values
    if np.any(v <= 0):
        raise NumericError("log: non-positive input")
    out = np.log(v)

    def back(g):
        return (g / v,)

    return out, back


def _p_exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(x.values)

    def back(g):
        return (g * out,)

    return out, back


def _p_sum(x, axis=None):
    v = x.values
    out = v.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, v.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), v.shape).copy(),)

    return out, back


def _p_mean(x, axis=None):
    v = x.values
    out = v.mean(axis=axis)
    n = v.size if axis is None else v.shape[axis]

    def back(g):
        if axis is None:
            return (np.broadcast_to(g / n, v.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), v.shape).copy(),)

    return out, back


_PRIMITIVES = {
    "matmul": _p_matmul,
    "add": _p_add,
    "elementwise_mul": _p_elementwise_mul,
    "div": _p_div,
    "concat": _p_concat,
    "slice": _p_slice,
    "sigmoid": _p_sigmoid,
    "tanh": _p_tanh,
    "relu": _p_relu,
    "square": _p_square,
    "log": _p_log,
    "exp": _p_exp,
    "sum": _p_sum,
    "mean": _p_mean,
}


class _Record:
    __slots__ = ("out", "inputs", "back")

    def __init__(self, out, inputs, back):
        self.out = out
        self.inputs = inputs
        self.back = back


def apply_primitive(kind, *inputs, **params) -> Tensor:
    """Apply a named primitive; records on the active tape when any input
    requires gradients."""
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise ContractError(f"apply_primitive: unknown primitive {kind!r}")
    out_values, back = fn(*inputs, **params)
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=req)
    tape = _active_tape()
    if tape is not None and req:
        tape._records.append(_Record(out, inputs, back))
        out.tape = tape
    return out


def backward(loss: Tensor) -> dict:
    """Reverse pass from a scalar loss.

    Returns {tensor: grad array} over every requires_grad tensor that
    participated; also assigns each one's .grad. Fan-out accumulates
    additively; each recorded primitive is visited exactly once.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.values.shape}")
    tape = loss.tape
    if tape is None:
        raise ContractError("backward: loss was not produced on an active tape")
    grads = {id(loss): np.ones_like(loss.values)}
    holders = {id(loss): loss}
    for rec in reversed(tape._records):
        gout = grads.get(id(rec.out))
        if gout is None:
            continue
        for t, g in zip(rec.inputs, rec.back(gout)):
            if g is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = g if acc is None else acc + g
            holders[id(t)] = t
    result = {}
    for tid, t in holders.items():
        t.grad = grads[tid]
        result[t] = grads[tid]
    return result


def finite_difference_check(f, theta: Tensor, step=1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps theta to a scalar Tensor and must reread theta.values on every
    call; probing mutates them in place. Relative error per coordinate is
    |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8).
    """
    if step <= 0:
        raise ContractError("finite_difference_check: step must be positive")
    with Tape():
        out = f(theta)
    grads = backward(out)
    if theta not in grads:
        raise ContractError("finite_difference_check: f does not depend on theta")
    g_a = grads[theta].astype(np.float64).reshape(-1)
    g_fd = np.empty(theta.values.size, dtype=np.float64)
    i = 0
    for idx in np.ndindex(theta.values.shape):
        orig = theta.values[idx]
        theta.values[idx] = orig + step
        up = float(f(theta).values)
        theta.values[idx] = orig - step
        dn = float(f(theta).values)
        theta.values[idx] = orig
        if not (np.isfinite(up) and np.isfinite(dn)):
            raise NumericError(f"finite_difference_check: non-finite value probing coordinate {idx}")
        g_fd[i] = (up - dn) / (2.0 * step)
        i += 1
    rel = np.abs(g_a - g_fd) / np.maximum(np.maximum(np.abs(g_a), np.abs(g_fd)), 1e-8)
    return float(rel.max())


# --- thin wrappers ----------------------------------------------------------

def matmul(a, b):
    return apply_primitive("matmul", a, b)


def add(a, b):
    return apply_primitive("add", a, b)


def mul(a, b):
    return apply_primitive("elementwise_mul", a, b)


def div(a, b):
    return apply_primitive("div", a, b)


def concat(tensors, axis=0):
    return apply_primitive("concat", *tensors, axis=axis)


def slice_axis(x, axis, start, stop):
    return apply_primitive("slice", x, axis=axis, start=start, stop=stop)


def sigmoid(x):
    return apply_primitive("sigmoid", x)


def tanh(x):
    return apply_primitive("tanh", x)


def relu(x):
    return apply_primitive("relu", x)


def square(x):
    return apply_primitive("square", x)


def log(x):
    return apply_primitive("log", x)


def exp(x):
    return apply_primitive("exp", x)


def reduce_sum(x, axis=None):
    return apply_primitive("sum", x, axis=axis)


def reduce_mean(x, axis=None):
    return apply_primitive("mean", x, axis=axis)


def scale(x, c):
    """x times a python scalar (composite, not a primitive)."""
    return mul(x, constant(np.asarray(c, dtype=x.values.dtype)))


def sub(a, b):
    return add(a, scale(b, -1.0))
