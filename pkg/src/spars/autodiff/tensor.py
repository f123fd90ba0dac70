"""Reverse-mode differentiable n-d array.

Every op produces a new :class:`Tensor` that remembers its parents and a
closure which maps the output gradient to parent gradients.  ``backward``
walks the recorded graph once in reverse topological order and then frees
it, so a second ``backward`` on the same loss is rejected.
"""
from __future__ import annotations

import numpy as np

from ..errors import NumericalError, ShapeError, UsageError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.name = name

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None):
        backward(self, grad)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make(data, parents, backward_fn):
    """Create the result node of an op."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None):
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    if loss._consumed:
        raise UsageError("backward() already ran on this graph; run a new forward pass first")
    if grad is None:
        if loss.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad=True")
    if not np.all(np.isfinite(loss.data)):
        raise NumericalError("loss is not finite")
    order = _topo_order(loss)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                _accumulate(p, pg)
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    # free the graph: one backward per forward pass
    for node in order:
        node._consumed = True
        node._parents = ()
        node._backward = None
    loss._consumed = True


# -- elementwise ---------------------------------------------------------

def _check_same(a, b, op):
    if a.shape != b.shape and b.data.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def _reduce_scalar(g, shape):
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.data.size == 1 and b.data.size != 1:
        a, b = b, a
    _check_same(a, b, "add")

    def bw(g):
        return g, _reduce_scalar(g, b.shape)

    return make(a.data + b.data, (a, b), bw)


def neg(a):
    return make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.data.size == 1 and b.data.size != 1:
        a, b = b, a
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return g * bd, _reduce_scalar(g * ad, b.shape)

    return make(ad * bd, (a, b), bw)


def power(a, exponent):
    x = a.data
    out = x ** exponent

    def bw(g):
        return (g * exponent * x ** (exponent - 1),)

    return make(out, (a,), bw)


def exp(a):
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,))


def log(a):
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return make(out, (a,), lambda g: (g / x,))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is zero where clamping was active."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b):
    """Elementwise min of two tensors; ties route the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "minimum")
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return make(out, (a, b), lambda g: (g * take_a, g * ~take_a))


def relu(a):
    x = a.data
    pos = x > 0
    return make(x * pos, (a,), lambda g: (g * pos,))


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    p = x >= 0
    out[p] = 1.0 / (1.0 + np.exp(-x[p]))
    ex = np.exp(x[~p])
    out[~p] = ex / (1.0 + ex)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis=-1):
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (a,), bw)


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return make(out, (a,), bw)


# -- reductions and shape ----------------------------------------------

def tsum(a, axis=None):
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make(np.asarray(out), (a,), bw)


def mean(a, axis=None):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / float(n))


def reshape(a, shape):
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def pick(a, index):
    """Select ``a[i, index[i]]`` for each row of a 2-d tensor."""
    if a.ndim != 2 or len(index) != a.shape[0]:
        raise ShapeError(f"pick: expected 2-d input with {len(index)} rows, got {a.shape}")
    rows = np.arange(a.shape[0])
    index = np.asarray(index)

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return make(a.data[rows, index], (a,), bw)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def check_finite(t: Tensor, what="tensor"):
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"{what} contains NaN or Inf")
    return t
