"""Reverse-mode automatic differentiation over numpy float64 arrays.

A Tensor wraps an ndarray and, when gradients are wanted, a closure that
pushes its output adjoint onto its parents. Graphs are built eagerly during
the forward pass and freed after backward(); nodes whose parents are all
constants short-circuit to constants, so evaluation-mode forwards cost no
graph bookkeeping.

Everything is double precision: the gradient contract of this package is
agreement with central finite differences at 1e-4 relative error, which
single precision cannot support.
"""
from __future__ import annotations

import numpy as np


class GradientError(ValueError):
    """Raised for malformed gradient requests (non-scalar outputs, NaNs)."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph. Leaf parameters set requires_grad."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or backward is not None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.value.size != 1:
            raise GradientError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.value)
        for node in order:
            if node._backward is not None:
                node._backward(node.grad)
                node._backward = None  # free the graph as we go
                node._parents = ()


def _toposort(root: Tensor) -> list:
    """Reverse topological order of the grad-requiring subgraph under root."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order[::-1]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    # copy on first touch: closures may hand the same buffer to several parents
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _node(value, parents, backward) -> Tensor:
    """Build a graph node, or a constant when no parent needs gradients."""
    if any(p.requires_grad for p in parents):
        return Tensor(value, parents=tuple(parents), backward=backward)
    return Tensor(value)


# -- arithmetic ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value + b.value

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.value.shape))

    return _node(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value - b.value

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.value.shape))

    return _node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value * b.value

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return _node(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.value, a.value.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.value / b.value**2, b.value.shape))

    return _node(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, -1)), b), (-1,))
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (-1, 1))), a.shape[:-1])
    out = a.value @ b.value

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape))

    return _node(out, (a, b), backward)


# -- elementwise nonlinearities -------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)

    def backward(g):
        _accum(a, g * out)

    return _node(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.value)

    def backward(g):
        _accum(a, g / a.value)

    return _node(out, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)

    def backward(g):
        _accum(a, g * 0.5 / out)

    return _node(out, (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, g * 2.0 * a.value)

    return _node(a.value**2, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)

    def backward(g):
        _accum(a, g * (1.0 - out**2))

    return _node(out, (a,), backward)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(np.asarray(a.value, dtype=np.float64))

    def backward(g):
        _accum(a, g * out * (1.0 - out))

    return _node(out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0

    def backward(g):
        _accum(a, g * mask)

    return _node(np.where(mask, a.value, 0.0), (a,), backward)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0

    def backward(g):
        _accum(a, g * np.where(mask, 1.0, slope))

    return _node(np.where(mask, a.value, slope * a.value), (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    # log(1+e^x) computed stably; gradient is the logistic sigmoid
    out = np.logaddexp(0.0, a.value)

    def backward(g):
        _accum(a, g * _stable_sigmoid(np.asarray(a.value, dtype=np.float64)))

    return _node(out, (a,), backward)


# -- reductions and shape ops ---------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.value.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.value.shape).copy())

    return _node(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max_(a, axis: int, keepdims=False) -> Tensor:
    """Max-pool along one axis; ties route the gradient to the first hit."""
    a = as_tensor(a)
    out = a.value.max(axis=axis, keepdims=keepdims)
    idx = a.value.argmax(axis=axis)

    def backward(g):
        if not keepdims:
            g_exp = np.expand_dims(g, axis)
        else:
            g_exp = g
        grad = np.zeros_like(a.value)
        np.put_along_axis(grad, np.expand_dims(idx, axis), g_exp, axis)
        _accum(a, grad)

    return _node(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.value.shape

    def backward(g):
        _accum(a, g.reshape(old))

    return _node(a.value.reshape(shape), (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _node(a.value.transpose(axes), (a,), backward)


def concatenate(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _node(out, tuple(tensors), backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.value, shape)

    def backward(g):
        _accum(a, _unbroadcast(g, a.value.shape))

    return _node(out, (a,), backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim + 1
    pos = axis if axis >= 0 else nd + axis
    return concatenate([reshape(t, t.shape[:pos] + (1,) + t.shape[pos:])
                        for t in tensors], axis=pos)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.value[idx]

    def backward(g):
        grad = np.zeros_like(a.value)
        np.add.at(grad, idx, g)
        _accum(a, grad)

    return _node(out, (a,), backward)


def take_along(a, indices: np.ndarray, axis: int) -> Tensor:
    """Batched gather along one axis; indices must be a permutation per slice."""
    a = as_tensor(a)
    out = np.take_along_axis(a.value, indices, axis)

    def backward(g):
        grad = np.zeros_like(a.value)
        np.put_along_axis(grad, indices, g, axis)
        _accum(a, grad)

    return _node(out, (a,), backward)


# -- softmax family ---------------------------------------------------------

def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - dot))

    return _node(out, (a,), backward)


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    m = a.value.max(axis=axis, keepdims=True)
    inner = log(sum_(exp(sub(a, Tensor(m))), axis=axis, keepdims=keepdims))
    return add(inner, Tensor(m if keepdims else m.squeeze(axis)))


def gumbel_softmax(logits, noise, temperature: float) -> Tensor:
    """Gumbel-softmax relaxation at fixed noise; differentiable in logits."""
    return softmax(mul(add(as_tensor(logits), Tensor(noise)), 1.0 / temperature), axis=-1)


# -- gradient driver ---------------------------------------------------------

def grad(scalar_output: Tensor, params: list) -> list:
    """Gradients of a scalar output w.r.t. each parameter.

    Parameters not reachable from the output get a zero gradient of their
    shape. NaN gradients are rejected.
    """
    if scalar_output.value.size != 1:
        raise GradientError(
            f"grad() needs a scalar output, got shape {scalar_output.shape}"
        )
    for p in params:
        p.zero_grad()
    if scalar_output.requires_grad:
        scalar_output.backward()
    grads = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        if not np.all(np.isfinite(g)):
            raise GradientError("non-finite gradient encountered")
        grads.append(g)
    return grads
