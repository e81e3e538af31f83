"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray plus an optional record of how it was produced
(parent tensors and a vector-Jacobian closure).  `backward` walks the record
in reverse topological order and accumulates gradients into every tensor with
`requires_grad`.  Repeated backward calls keep summing into `.grad`, which is
what per-part gradient accumulation relies on.

Production runs use float32; tests build float64 graphs for finite-difference
headroom.  All reductions use a fixed order, so identical inputs give
bit-identical values.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None


def tensor(data, requires_grad=False, dtype=None, name=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def parameter(data, name=None):
    return tensor(data, requires_grad=True, name=name)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return tensor(x, dtype=dtype)


def _make(data, parents, vjp):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, vjp=vjp)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_same_shape(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a.data, b.data, "add")
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a.data, b.data, "sub")
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a.data, b.data, "mul")
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, s):
    a = as_tensor(a)
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def absval(a):
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a.data, b.data, "maximum")
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    pos = a.data >= 0
    out = np.where(pos, a.data, slope * a.data)
    return _make(out, (a,), lambda g: (g * np.where(pos, 1.0, slope).astype(a.dtype),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# shape / indexing


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(tensors), vjp)


def cols(a, j0, j1):
    """Column slice a[:, j0:j1]."""
    a = as_tensor(a)

    def vjp(g):
        z = np.zeros_like(a.data)
        z[:, j0:j1] = g
        return (z,)

    return _make(a.data[:, j0:j1], (a,), vjp)


def _segment_sum(rows, idx, size):
    """Sum rows (N,C) into (size,C) buckets given by idx; empty buckets stay 0."""
    out = np.zeros((size,) + rows.shape[1:], dtype=rows.dtype)
    if len(idx) == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    srows = rows[order]
    starts = np.nonzero(np.r_[True, sidx[1:] != sidx[:-1]])[0]
    out[sidx[starts]] = np.add.reduceat(srows, starts, axis=0)
    return out


def gather(a, idx):
    """Row selection a[idx]; idx is a constant integer array."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather expects a 1-D index array")
    return _make(a.data[idx], (a,), lambda g: (_segment_sum(g, idx, a.shape[0]),))


def scatter_mean(a, idx, size):
    """Bucket rows of a by idx and average within each bucket.

    Every bucket in [0, size) must receive at least one row.
    """
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    counts = np.bincount(idx, minlength=size)
    if (counts == 0).any():
        empty = int(np.nonzero(counts == 0)[0][0])
        raise ValueError(f"scatter_mean: bucket {empty} receives no rows")
    sums = _segment_sum(a.data, idx, size)
    inv = (1.0 / counts).astype(a.dtype)
    out = sums * inv.reshape((size,) + (1,) * (a.data.ndim - 1))

    def vjp(g):
        w = inv[idx].reshape((len(idx),) + (1,) * (a.data.ndim - 1))
        return (g[idx] * w,)

    return _make(out, (a,), vjp)


class SparseLinear:
    """A constant sparse matrix applied to tensors, with cached transpose.

    Matrices are materialized per dtype so float32 graphs stay float32.
    """

    def __init__(self, rows, cols_, values, shape):
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols_, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        self.matrix_shape = tuple(shape)
        self._cache = {}

    def _mats(self, dtype):
        key = np.dtype(dtype).str
        if key not in self._cache:
            m = sp.csr_array(
                (self.values.astype(dtype), (self.rows, self.cols)), shape=self.matrix_shape
            )
            self._cache[key] = (m, m.T.tocsr())
        return self._cache[key]


def spmm(lin, a):
    """lin @ a for a constant SparseLinear lin and a 2-D tensor a."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] != lin.matrix_shape[1]:
        raise ValueError(f"spmm: matrix {lin.matrix_shape} incompatible with {a.shape}")
    m, mt = lin._mats(a.dtype)
    return _make(m @ a.data, (a,), lambda g: (mt @ g,))


# ---------------------------------------------------------------------------
# reductions / norms / normalization


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _make(out, (a,), vjp)


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def rownorm(a):
    """Euclidean norm along the last axis; zero rows get zero gradient."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=-1))

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        return ((g / safe)[..., None] * a.data * (n > 0)[..., None],)

    return _make(n, (a,), vjp)


def group_norm(x, gamma, beta, num_groups, eps=1e-5):
    """Group normalization over an (N, C) feature map.

    Channels are split into `num_groups` groups; statistics are taken over
    all rows and the channels within each group (batch size is one mesh, so
    batch statistics are not available).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c = x.shape
    if c % num_groups:
        raise ValueError(f"channels {c} not divisible by {num_groups} groups")
    gs = c // num_groups
    xg = x.data.reshape(n, num_groups, gs)
    mean = xg.mean(axis=(0, 2), keepdims=True)
    var = xg.var(axis=(0, 2), keepdims=True)
    std = np.sqrt(var + eps)
    xhat = ((xg - mean) / std).reshape(n, c)
    out = xhat * gamma.data + beta.data

    def vjp(g):
        dxhat = (g * gamma.data).reshape(n, num_groups, gs)
        xh = xhat.reshape(n, num_groups, gs)
        m1 = dxhat.mean(axis=(0, 2), keepdims=True)
        m2 = (dxhat * xh).mean(axis=(0, 2), keepdims=True)
        dx = ((dxhat - m1 - xh * m2) / std).reshape(n, c)
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# engine


def backward(loss):
    """Accumulate d(loss)/d(tensor) into `.grad` of every reachable tensor
    that requires gradients.  `loss` must be scalar."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.array(g, copy=True)
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            cur = grads.get(id(p))
            grads[id(p)] = pg if cur is None else cur + pg


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params, lr=1.1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                name = p.name or f"param[{i}]"
                raise FloatingPointError(f"non-finite gradient for {name}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
