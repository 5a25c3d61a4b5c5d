"""Reverse-mode automatic differentiation over dense float64 tensors.

Small tape-based engine: every differentiable value is a :class:`Tensor`
holding a flat numpy buffer, links to its producing operation, and a grad
slot filled by :func:`backward`. Only the broadcasting the networks in this
package need is supported; everything is float64.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class GraphError(RuntimeError):
    """Misuse of the tape (non-scalar backward, cycles, ...)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording; ops return constant tensors."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Autodiff value node: data buffer, grad slot, parent links.

    ``data`` is stored as a C-contiguous float64 array and is treated as
    immutable once the node has consumers; only ``grad`` mutates after
    creation.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, parents, backward, op) -> Tensor:
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), bwd, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(out, (a, b), bwd, "matmul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)

    def bwd(g):
        _accumulate(x, g * mask)

    return _make(out, (x,), bwd, "relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def bwd(g):
        _accumulate(x, g * (1.0 - out * out))

    return _make(out, (x,), bwd, "tanh")


def absolute(x) -> Tensor:
    x = as_tensor(x)
    out = np.abs(x.data)

    def bwd(g):
        # subgradient 0 at the kink
        _accumulate(x, g * np.sign(x.data))

    return _make(out, (x,), bwd, "abs")


def square(x) -> Tensor:
    x = as_tensor(x)
    out = x.data * x.data

    def bwd(g):
        _accumulate(x, g * 2.0 * x.data)

    return _make(out, (x,), bwd, "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def bwd(g):
        _accumulate(x, g * 0.5 / out)

    return _make(out, (x,), bwd, "sqrt")


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape).copy())
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _make(out, (x,), bwd, "sum")


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    out = x.data.mean(axis=axis)

    def bwd(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g / n, x.shape).copy())
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy())

    return _make(out, (x,), bwd, "mean")


def amax(x, axis) -> Tensor:
    """Max-pool along one axis; ties route the gradient to the lowest index."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)  # argmax picks the first maximum
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        _accumulate(x, gx)

    return _make(out, (x,), bwd, "max_pool")


def concat(parts, axis=-1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[p.shape for p in parts]} do not stack on axis {axis}") from None
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(sl)])

    return _make(out, tuple(parts), bwd, "concat")


def gather(x, indices, axis=0) -> Tensor:
    """Select rows along an axis; scattered gradient accumulates duplicates."""
    x = as_tensor(x)
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ShapeError(f"gather: index array must be 1-d, got {idx.shape}")
    out = np.take(x.data, idx, axis=axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        if axis == 0:
            np.add.at(gx, idx, g)
        else:
            gx_m = np.moveaxis(gx, axis, 0)
            np.add.at(gx_m, idx, np.moveaxis(g, axis, 0))
        _accumulate(x, gx)

    return _make(out, (x,), bwd, "gather")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bwd(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(out, (x,), bwd, "reshape")


def huber(x, delta) -> Tensor:
    """Elementwise Huber: t^2/2 inside |t| <= delta, linear outside."""
    if delta <= 0:
        raise ValueError(f"huber: delta must be positive, got {delta}")
    x = as_tensor(x)
    a = np.abs(x.data)
    inside = a <= delta
    out = np.where(inside, 0.5 * x.data * x.data, delta * (a - 0.5 * delta))

    def bwd(g):
        _accumulate(x, g * np.where(inside, x.data, delta * np.sign(x.data)))

    return _make(out, (x,), bwd, "huber")


def l2norm_rows(x) -> Tensor:
    """Euclidean norm over the last axis; zero rows get subgradient 0."""
    x = as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=-1))

    def bwd(g):
        safe = np.where(out > 0.0, out, 1.0)
        _accumulate(x, (g / safe)[..., None] * x.data)

    return _make(out, (x,), bwd, "l2norm_rows")


def backward(loss: Tensor):
    """Populate grads of every requires_grad ancestor of a scalar loss.

    Repeated calls without zeroing accumulate. Traversal is a reverse
    topological order; each node's backward runs exactly once.
    """
    if loss.size != 1:
        raise GraphError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f, x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    if h <= 0:
        raise ValueError(f"grad_check: h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    xt = parameter(x)
    y = f(xt)
    backward(y)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x)).item()
        flat[i] = orig - h
        fm = f(Tensor(x)).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        raise NumericError("grad_check: non-finite gradient values")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
