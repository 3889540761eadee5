"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every public op returns a new :class:`Tensor` that remembers its parents and a
backward rule. Calling :func:`backward` on a scalar walks the recorded graph in
reverse topological order and fills the ``grad`` slot of every leaf that
requires a gradient.

Conventions:

* ReLU has derivative 0 at exactly 0.
* ``arccos`` clamps its argument to ``[-1 + 1e-7, 1 - 1e-7]`` first, which keeps
  ``1/sqrt(1 - u^2)`` below ~2.2e3.
* ``max`` routes the gradient to the first maximal entry.
* ``l2norm`` has zero gradient at the origin.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ARCCOS_CLAMP = 1e-7

__all__ = [
    "ARCCOS_CLAMP",
    "ContractError",
    "NumericError",
    "Tensor",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "tanh",
    "exp",
    "log",
    "arccos",
    "tsum",
    "mean",
    "l2norm",
    "tmax",
    "concat",
    "reshape",
    "pick",
    "log_softmax",
    "stable_log_softmax",
    "conv2d",
    "maxpool2d",
    "backward",
    "grad",
    "ancestors",
    "finite_diff_grad",
]


class ContractError(ValueError):
    """A caller broke an op's precondition (shapes, ranges, arity)."""


class NumericError(ArithmeticError):
    """An op met or produced a non-finite value."""


class Tensor:
    """A float64 array plus an optional gradient slot and its tape record."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward_fn: Callable | None = None,
                 name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"{op}: non-finite value encountered")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _lift(x, op: str) -> Tensor:
    if isinstance(x, Tensor):
        return x
    try:
        return Tensor(x, op=op)
    except NumericError:
        raise NumericError(f"{op}: non-finite input") from None


def _node(data, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    req = False
    for p in parents:
        if p.requires_grad:
            req = True
            break
    return Tensor(data, req, op=op, parents=parents if req else (),
                  backward_fn=backward_fn if req else None)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, "add"), _lift(b, "add")
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a, "sub"), _lift(b, "sub")
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a, "mul"), _lift(b, "mul")
    _check_broadcast("mul", a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a, "divide"), _lift(b, "divide")
    _check_broadcast("divide", a, b)
    if np.any(b.data == 0):
        raise NumericError("divide: division by zero")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _node(out, "divide", (a, b), bw)


def neg(a) -> Tensor:
    a = _lift(a, "negate")
    return _node(-a.data, "negate", (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product of a 2-D ``a`` with a 2-D or 1-D ``b``."""
    a, b = _lift(a, "matmul"), _lift(b, "matmul")
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ b.data.T if b.ndim == 2 else np.outer(g, b.data)
        if b.requires_grad:
            gb = a.data.T @ g
        return ga, gb

    return _node(a.data @ b.data, "matmul", (a, b), bw)


# -- elementwise unary -------------------------------------------------------

def relu(a) -> Tensor:
    a = _lift(a, "relu")
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _lift(a, "tanh")
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = _lift(a, "exp")
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a, "log")
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def arccos(a) -> Tensor:
    a = _lift(a, "arccos")
    lo, hi = -1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP
    u = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        return (np.where(inside, -g / np.sqrt(1.0 - u * u), 0.0),)

    return _node(np.arccos(u), "arccos", (a,), bw)


# -- reductions --------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a, "sum")
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _node(out, "sum", (a,), lambda g: (_expand(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a, "mean")
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.size / max(out.size, 1)
    return _node(out, "mean", (a,), lambda g: (_expand(g, a.shape, axis, keepdims) / n,))


def l2norm(a, axis=-1, keepdims=False) -> Tensor:
    a = _lift(a, "l2norm")
    nrm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(nrm > 0, nrm, 1.0)
        return (np.where(nrm > 0, gk * a.data / safe, 0.0),)

    out = nrm if keepdims else np.squeeze(nrm, axis=axis)
    return _node(out, "l2norm", (a,), bw)


def tmax(a, axis=-1) -> Tensor:
    """Max over one axis; ties send the gradient to the first maximal entry."""
    a = _lift(a, "max")
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.squeeze(np.take_along_axis(a.data, idx, axis=axis), axis=axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _node(out, "max", (a,), bw)


# -- structural --------------------------------------------------------------

def concat(tensors: Sequence, axis=0) -> Tensor:
    ts = tuple(_lift(t, "concat") for t in tensors)
    if not ts:
        raise ContractError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ContractError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(out, "concat", ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(a, shape) -> Tensor:
    a = _lift(a, "reshape")
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractError(f"reshape: {exc}") from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def pick(a, index) -> Tensor:
    """Row-wise gather ``a[i, index[i]]`` from a 2-D tensor."""
    a = _lift(a, "pick")
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ContractError(f"pick: need 2-D input and one index per row, got {a.shape}, {index.shape}")
    if np.any(index < 0) or np.any(index >= a.shape[1]):
        raise ContractError("pick: index out of range")
    rows = np.arange(a.shape[0])

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[rows, index] = g
        return (ga,)

    return _node(a.data[rows, index], "pick", (a,), bw)


def log_softmax(a, axis=-1) -> Tensor:
    """Max-shifted log-softmax along ``axis``."""
    a = _lift(a, "log_softmax")
    if a.size == 0 or a.shape[axis] == 0:
        raise ContractError("log_softmax: empty input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _node(out, "log_softmax", (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


stable_log_softmax = log_softmax


# -- convolutional extractor pieces -------------------------------------------

def conv2d(x, w, b=None) -> Tensor:
    """Valid (unpadded) stride-1 convolution, NCHW input, weight (F, C, k, k)."""
    x, w = _lift(x, "conv2d"), _lift(w, "conv2d")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ContractError(f"conv2d: input {x.shape} and weight {w.shape} do not conform")
    kh, kw = w.shape[2:]
    ho, wo = x.shape[2] - kh + 1, x.shape[3] - kw + 1
    if ho < 1 or wo < 1:
        raise ContractError("conv2d: kernel larger than input")
    cols = sliding_window_view(x.data, (kh, kw), axis=(2, 3))  # N C Ho Wo kh kw
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = (x, w)
    if b is not None:
        b = _lift(b, "conv2d")
        if b.shape != (w.shape[0],):
            raise ContractError(f"conv2d: bias {b.shape} does not match {w.shape[0]} filters")
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho, j:j + wo] += np.tensordot(
                        g, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)) if b.requires_grad else None,)
        return grads

    return _node(np.ascontiguousarray(out), "conv2d", parents, bw)


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial extents must divide by ``size``."""
    x = _lift(x, "maxpool2d")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ContractError(f"maxpool2d: extents {(h, w)} not divisible by {size}")
    ho, wo = h // size, w // size
    blocks = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, size * size)
    idx = np.argmax(blocks, axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((n, c, ho, wo, size * size))
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _node(out, "maxpool2d", (x,), bw)


# -- reverse sweep -----------------------------------------------------------

def _topo(seed: Tensor) -> list:
    order, seen = [], set()
    stack = [(seed, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def ancestors(seed: Tensor) -> set:
    """ids of every tensor reachable from ``seed`` through recorded parents."""
    return {id(t) for t in _topo(seed)}


def backward(seed: Tensor) -> None:
    """Populate ``grad`` on every leaf under ``seed`` that requires a gradient.

    Leaves that require a gradient but are not reached keep ``grad=None``;
    use :func:`grad` when zeros are wanted for unused parameters.
    """
    if seed.size != 1:
        raise ContractError(f"backward: seed must be scalar, got shape {seed.shape}")
    acc = {id(seed): np.ones_like(seed.data)}
    for node in reversed(_topo(seed)):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node.parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            acc[key] = gp if key not in acc else acc[key] + gp


def grad(seed: Tensor, wrt: Mapping[str, Tensor] | Iterable[Tensor]) -> dict:
    """Gradients of scalar ``seed`` w.r.t. ``wrt``; unused entries get zeros.

    ``wrt`` is a name->Tensor mapping (result keyed by name) or a sequence of
    tensors (result keyed by position).
    """
    items = list(wrt.items()) if isinstance(wrt, Mapping) else list(enumerate(wrt))
    for _, t in items:
        t.grad = None
    backward(seed)
    out = {}
    for k, t in items:
        out[k] = np.zeros_like(t.data) if t.grad is None else np.array(t.grad)
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5, order: int = 2) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time.

    ``order=4`` uses the five-point stencil, whose O(h^4) truncation allows a
    larger ``h`` and so less cancellation when ``|f|`` is large.
    """
    if h <= 0:
        raise ContractError("finite_diff_grad: step must be positive")
    if order not in (2, 4):
        raise ContractError(f"finite_diff_grad: order must be 2 or 4, got {order}")
    offsets, weights = ((1, -1), (1, -1)) if order == 2 else ((2, 1, -1, -2), (-1, 8, -8, 1))
    denom = 2 * h if order == 2 else 12 * h
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        vals = []
        for k in offsets:
            flat[i] = orig + k * h
            vals.append(float(f(x)))
        flat[i] = orig
        if not np.all(np.isfinite(vals)):
            raise NumericError(f"finite_diff_grad: objective non-finite at coordinate {i}")
        gflat[i] = sum(w * v for w, v in zip(weights, vals)) / denom
    return g
