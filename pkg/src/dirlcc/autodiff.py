"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive checks its shape rule, computes the forward value with numpy
and, when grad mode is on and some input requires a gradient, records a node
holding the closure that maps the upstream gradient to input gradients.
Broadcasting is deliberately absent apart from two cases: ``scale`` by a
Python scalar and bias-add of a 1-D tensor over the last axis.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, StateError

LAYER_NORM_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward", "consumed")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.consumed = False


class Tensor:
    """A float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("tensor initialised with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data.copy()

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, out: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericError(f"{op}: non-finite output")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.node = None
    t.requires_grad = False
    if _grad_enabled and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        t.node = Node(op, inputs, backward)
    return t


def _shape_error(op, a, b):
    return DimensionError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _is_bias(a, b):
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0] and a.shape != b.shape


def _reduce_bias(g):
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if (
        a.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise _shape_error("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result("matmul", out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _is_bias(a, b)
    if a.shape != b.shape and not bias:
        raise _shape_error("add", a.shape, b.shape)

    def backward(g):
        return g, (_reduce_bias(g) if bias else g)

    return _result("add", a.data + b.data, (a, b), backward)


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _is_bias(a, b)
    if a.shape != b.shape and not bias:
        raise _shape_error("subtract", a.shape, b.shape)

    def backward(g):
        return g, -(_reduce_bias(g) if bias else g)

    return _result("subtract", a.data - b.data, (a, b), backward)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("multiply", a.shape, b.shape)

    def backward(g):
        return (
            g * b.data if a.requires_grad else None,
            g * a.data if b.requires_grad else None,
        )

    return _result("multiply", a.data * b.data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result("scale", a.data * c, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0

    def backward(g):
        return (g * pos,)

    return _result("relu", np.where(pos, a.data, 0.0), (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _result("exp", out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NumericError("log: non-positive input")
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _result("log", out, (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (2.0 * g * a.data,)

    return _result("square", a.data * a.data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if (a.data < 0).any():
        raise NumericError("sqrt: negative input")
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            gi = 0.5 * g / out
        if not np.isfinite(gi).all():
            raise NumericError("sqrt: infinite derivative at zero")
        return (gi,)

    return _result("sqrt", out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (a,), backward)


def layer_norm(a, gain=None, bias=None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply optional per-feature gain and bias."""
    a = as_tensor(a)
    d = a.shape[-1]
    gain_t = as_tensor(gain) if gain is not None else None
    bias_t = as_tensor(bias) if bias is not None else None
    inputs = [a]
    for p in (gain_t, bias_t):
        if p is not None:
            if p.shape != (d,):
                raise _shape_error("layer_norm", a.shape, p.shape)
            inputs.append(p)

    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    if gain_t is not None:
        out = out * gain_t.data
    if bias_t is not None:
        out = out + bias_t.data

    def backward(g):
        gx = g * gain_t.data if gain_t is not None else g
        ga = None
        if a.requires_grad:
            ga = inv * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
        grads = [ga]
        if gain_t is not None:
            grads.append(_reduce_bias(g * xhat))
        if bias_t is not None:
            grads.append(_reduce_bias(g))
        return tuple(grads)

    return _result("layer_norm", out, tuple(inputs), backward)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _result("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, a.shape).copy(),)

    return _result("mean", np.asarray(out), (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ref = ts[0]
    ax = axis % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise _shape_error("concat", ref.shape, t.shape)
    out = np.concatenate([t.data for t in ts], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result("concat", out, ts, backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result("transpose", np.transpose(a.data, axes), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _result("reshape", out, (a,), backward)


def embedding(table, ids) -> Tensor:
    """Gather rows of a (vocab, width) table by integer ids of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table of {table.shape[0]} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result("embedding", table.data[ids], (table,), backward)


# ------------------------------------------------------------------ backward


def _topological(loss: Tensor):
    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            if t.node.consumed:
                raise StateError("backward already ran on this graph; run a new forward pass")
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("loss was not produced by a recorded operation")
    if loss.node.consumed:
        raise StateError("backward already ran on this graph; run a new forward pass")
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            g = np.zeros_like(t.data)
        node = t.node
        if node is None:
            t.grad = g
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
        node.consumed = True
        node.backward = None


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max over all input coordinates of |analytic - central difference| / max(1, |cd|)."""
    if not 0 < eps <= 1e-3:
        raise ContractError(f"eps must lie in (0, 1e-3], got {eps}")
    for x in inputs:
        if not x.requires_grad:
            raise ContractError("grad_check inputs must require grad")
        x.zero_grad()
    loss = f(*inputs)
    if loss.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
    backward(loss)
    worst = 0.0
    with no_grad():
        for x in inputs:
            analytic = x.grad.copy()
            flat = x.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*inputs).data)
                flat[i] = orig - eps
                fm = float(f(*inputs).data)
                flat[i] = orig
                numeric = (fp - fm) / (2 * eps)
                err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
