"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward rule on the output tensor.
Node ids come from a global counter, so creation order is a valid
topological order of the recorded graph; :func:`backward` walks the
reachable nodes in decreasing id and visits each exactly once.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import (
    ContractError,
    DegenerateNeighborhoodError,
    DimensionError,
    InsufficientBatchError,
)

_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self.op}{flag})"

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


def tensor(data, requires_grad=False):
    """Create a leaf tensor holding a float64 copy of ``data``."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data, parents, backward_fn, op):
    """Wrap ``data`` as the output of a recorded operation.

    ``backward_fn`` receives the output gradient and returns one gradient
    (or None) per parent, in order.
    """
    parents = tuple(parents)
    needs_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs_grad:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.node_id in nodes:
            continue
        nodes[node.node_id] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads = {loss.node_id: np.ones_like(loss.data)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, name):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(a.data + b.data, (a, b), _bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_op(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def _bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(a.data * b.data, (a, b), _bw, "mul")


def scale(a, c):
    """Multiply by a Python scalar."""
    c = float(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def maximum(a, b):
    """Elementwise maximum; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    take_a = a.data >= b.data

    def _bw(g):
        return _unbroadcast(np.where(take_a, g, 0.0), a.shape), _unbroadcast(np.where(take_a, 0.0, g), b.shape)

    return make_op(np.maximum(a.data, b.data), (a, b), _bw, "maximum")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_op(a.data @ b.data, (a, b), _bw, "matmul")


def transpose(a):
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return make_op(a.data.T, (a,), lambda g: (g.T,), "transpose")


def relu(a):
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sum(a, axis=None):  # noqa: A001
    shape = a.shape

    def _bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(a.data.sum(axis=axis), (a,), _bw, "sum")


def mean(a, axis=None):
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def reshape(a, shape):
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(data, tensors, _bw, "concat")


def repeat_cols(a, m):
    """Repeat every column ``m`` times: output column j reads input column j // m."""
    n, d = a.shape

    def _bw(g):
        return (g.reshape(n, d, m).sum(axis=2),)

    return make_op(np.repeat(a.data, m, axis=1), (a,), _bw, "repeat_cols")


def _scatter_rows(g, idx, n):
    if g.ndim == 1:
        out = np.zeros(n)
        np.add.at(out, idx, g)
        return out
    m = idx.shape[0]
    routing = sparse.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(n, m))
    return np.asarray(routing @ g.reshape(m, -1)).reshape((n,) + g.shape[1:])


def gather_rows(a, idx):
    """Select rows ``a[idx]``; backward scatter-adds into the source rows."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    if idx.size:
        bad = idx[(idx < 0) | (idx >= n)]
        if bad.size:
            raise IndexError(f"gather_rows: index {int(bad[0])} out of range for {n} rows")
    return make_op(a.data[idx], (a,), lambda g: (_scatter_rows(g, idx, n),), "gather_rows")


def check_segments(offsets, rows):
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets.ndim != 1 or offsets.size < 2 or offsets[0] != 0 or offsets[-1] != rows:
        raise ContractError(f"segment offsets must run from 0 to {rows}")
    counts = np.diff(offsets)
    if np.any(counts <= 0):
        raise DegenerateNeighborhoodError(f"segment {int(np.argmax(counts <= 0))} is empty")
    return offsets, counts


def segment_sum_np(x, offsets):
    """Sum contiguous row groups; the reduction order is fixed row by row."""
    return np.add.reduceat(x, offsets[:-1], axis=0)


def segment_sum(a, offsets):
    offsets, counts = check_segments(offsets, a.shape[0])
    return make_op(segment_sum_np(a.data, offsets), (a,),
                   lambda g: (np.repeat(g, counts, axis=0),), "segment_sum")


def segment_mean(a, offsets):
    """Per-segment arithmetic mean of contiguous row groups."""
    offsets, counts = check_segments(offsets, a.shape[0])
    shape = (-1,) + (1,) * (a.ndim - 1)
    c = counts.reshape(shape).astype(np.float64)

    def _bw(g):
        return (np.repeat(g / c, counts, axis=0),)

    return make_op(segment_sum_np(a.data, offsets) / c, (a,), _bw, "segment_mean")


def segment_max(a, offsets):
    """Per-segment maximum; backward routes to the first argmax row."""
    offsets, counts = check_segments(offsets, a.shape[0])
    argmax = np.stack([offsets[i] + np.argmax(a.data[offsets[i]:offsets[i + 1]], axis=0)
                       for i in range(len(counts))])
    cols = np.arange(a.shape[1])
    out = a.data[argmax, cols]

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (argmax, np.broadcast_to(cols, argmax.shape)), g)
        return (full,)

    return make_op(out, (a,), _bw, "segment_max")


@dataclass
class BNState:
    """Per-channel batch-norm parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches: int = field(default=0)

    @classmethod
    def create(cls, d, momentum=0.1, eps=1e-5):
        return cls(
            gamma=Tensor(np.ones(d), requires_grad=True),
            beta=Tensor(np.zeros(d), requires_grad=True),
            running_mean=np.zeros(d),
            running_var=np.ones(d),
            momentum=momentum,
            eps=eps,
        )


def batch_stats_normalize(a, state, training):
    if a.ndim != 2 or a.shape[1] != state.gamma.shape[0]:
        raise DimensionError(f"batch norm over {state.gamma.shape[0]} channels got shape {a.shape}")
    gamma, beta = state.gamma, state.beta
    n = a.shape[0]
    if training:
        if n < 2:
            raise InsufficientBatchError(f"batch norm in training mode needs >= 2 rows, got {n}")
        mu = a.data.mean(axis=0)
        var = a.data.var(axis=0)
        state.running_mean = (1.0 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1.0 - state.momentum) * state.running_var + state.momentum * var
        state.num_batches += 1
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (a.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def _bw(g):
        dxhat = g * gamma.data
        if training:
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return make_op(out, (a, gamma, beta), _bw, "batch_norm")
