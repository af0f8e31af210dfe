"""Dense reverse-mode differentiation over float64 numpy arrays.

The tape is dynamic: every op on a tensor that requires gradients records
its parents and a backward closure, and ``backward`` walks the recorded
graph in reverse topological order. Graphs are rebuilt every step.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from scipy import sparse

LOG_EPS = 1e-12

_node_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "node_id")
    __array_priority__ = 100

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def __len__(self):
        return len(self.values)

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values)

    def detach(self):
        return Tensor(self.values)

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents, backward):
    out = Tensor(values)
    if _grad_enabled:
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise binary ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.values + b.values, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.values - b.values, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.values, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.values, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.values * b.values, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.values / b.values

    def backward(g):
        ga = _unbroadcast(g / b.values, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.values, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def matmul(a, b):
    """``a`` of shape (..., k) times a 2-D ``b`` of shape (k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.values.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k, m = b.shape
            gb = a.values.reshape(-1, k).T @ g.reshape(-1, m)
        return ga, gb

    return _make(a.values @ b.values, (a, b), backward)


# elementwise unary ops

def relu(x):
    x = as_tensor(x)
    out = np.maximum(x.values, 0.0)

    def backward(g):
        return (g * (out > 0),)

    return _make(out, (x,), backward)


def sigmoid(x):
    x = as_tensor(x)
    v = x.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward)


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.values)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), backward)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.values)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward)


def log(x, eps=LOG_EPS):
    """Natural log with the input floored at ``eps``."""
    x = as_tensor(x)
    floored = np.maximum(x.values, eps)

    def backward(g):
        return (np.where(x.values >= eps, g / floored, 0.0),)

    return _make(np.log(floored), (x,), backward)


def absolute(x):
    x = as_tensor(x)

    def backward(g):
        return (g * np.sign(x.values),)

    return _make(np.abs(x.values), (x,), backward)


def clip(x, lo, hi):
    x = as_tensor(x)
    lo_v = np.asarray(lo, dtype=np.float64)
    hi_v = np.asarray(hi, dtype=np.float64)
    inside = (x.values >= lo_v) & (x.values <= hi_v)

    def backward(g):
        return (g * inside,)

    return _make(np.clip(x.values, lo_v, hi_v), (x,), backward)


def huber(x, delta=1.0):
    """Elementwise Huber penalty of a residual."""
    x = as_tensor(x)
    ax = np.abs(x.values)
    quad = ax <= delta
    out = np.where(quad, 0.5 * x.values ** 2, delta * (ax - 0.5 * delta))

    def backward(g):
        return (g * np.where(quad, x.values, delta * np.sign(x.values)),)

    return _make(out, (x,), backward)


def where(mask, a, b):
    mask = np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(np.where(mask, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(mask, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(np.where(mask, a.values, b.values), (a, b), backward)


# reductions and softmax family

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.values, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.values.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(np.mean(x.values, axis=axis, keepdims=keepdims), (x,), backward)


def max_pool(x, axis):
    """Max over ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    idx = np.expand_dims(np.argmax(x.values, axis=axis), axis)
    out = np.take_along_axis(x.values, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.values)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(np.squeeze(out, axis=axis), (x,), backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def cross_entropy(logits, target):
    """Per-row softmax cross-entropy for integer class targets on the last axis."""
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    if logits.shape[:-1] != target.shape:
        raise ValueError(f"cross_entropy: logits {logits.shape} vs targets {target.shape}")
    lsm = log_softmax(logits, axis=-1)
    picked = take_along_last(lsm, target)
    return mul(picked, -1.0)


def binary_cross_entropy_with_logits(logits, target):
    """Elementwise BCE computed stably from logits."""
    logits = as_tensor(logits)
    y = np.asarray(target, dtype=np.float64)
    if logits.shape != y.shape:
        raise ValueError(f"binary_cross_entropy: logits {logits.shape} vs targets {y.shape}")
    z = logits.values
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    sig = 1.0 / (1.0 + np.exp(-z))

    def backward(g):
        return (g * (sig - y),)

    return _make(out, (logits,), backward)


# shape and indexing ops

def reshape(x, shape):
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(x.values.reshape(shape), (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.values for t in tensors], axis=ax), tuple(tensors), backward)


def gather(x, indices, axis=0):
    """Select entries along ``axis``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim

    def backward(g):
        lead = np.moveaxis(g, list(range(ax, ax + indices.ndim)), list(range(indices.ndim)))
        rest = lead.shape[indices.ndim:]
        flat = scatter_rows(indices.reshape(-1), lead.reshape(indices.size, -1), x.shape[ax])
        return (np.moveaxis(flat.reshape((x.shape[ax],) + rest), 0, ax),)

    return _make(np.take(x.values, indices, axis=ax), (x,), backward)


def scatter_rows(index, rows, n):
    """``out[index[i]] += rows[i]`` for a 2-D ``rows``, returned as (n, cols)."""
    ones = np.ones(len(index))
    mat = sparse.csr_matrix((ones, (index, np.arange(len(index)))), shape=(n, len(index)))
    return np.asarray(mat @ rows)


def take_along_last(x, index):
    """``x[..., index]`` with one index per leading position."""
    x = as_tensor(x)
    idx = np.expand_dims(np.asarray(index, dtype=np.int64), -1)

    def backward(g):
        gx = np.zeros_like(x.values)
        np.put_along_axis(gx, idx, np.expand_dims(g, -1), axis=-1)
        return (gx,)

    return _make(np.take_along_axis(x.values, idx, axis=-1)[..., 0], (x,), backward)


def segment_sum(x, segment_ids, num_segments):
    """Sum rows of ``x`` into ``num_segments`` buckets given by ``segment_ids``."""
    x = as_tensor(x)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if len(ids) != x.shape[0]:
        raise ValueError(f"segment_sum: {len(ids)} ids for {x.shape[0]} rows")
    out = scatter_rows(ids, x.values.reshape(len(ids), -1), num_segments).reshape((num_segments,) + x.shape[1:])

    def backward(g):
        return (g[ids],)

    return _make(out, (x,), backward)


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x, index):
    x = as_tensor(x)
    basic = _is_basic(index)

    def backward(g):
        gx = np.zeros_like(x.values)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _make(x.values[index], (x,), backward)


def stop_gradient(x):
    return Tensor(as_tensor(x).values)


# backward pass

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {loss.node_id: np.ones_like(loss.values)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
