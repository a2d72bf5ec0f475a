"""Reverse-mode automatic differentiation over dense numpy arrays.

Every primitive returns a new :class:`Tensor`. When any input requires a
gradient (and recording is enabled) the result remembers its parents and a
closure mapping the output gradient to input gradients. Node ids increase with
creation, so descending id order is a valid reverse topological order.
"""

import itertools
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from ..errors import DomainError, ShapeError

_ids = itertools.count()
_recording = True
_faults = {}

SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextmanager
def no_grad():
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


@contextmanager
def inject_fault(kind, scale=1.01):
    """Scale the input gradient of primitive ``kind`` by ``scale`` (negative-control hook)."""
    _faults[kind] = scale
    try:
        yield
    finally:
        _faults.pop(kind, None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "id", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.op = "leaf"
        self.id = next(_ids)
        self._parents = ()
        self._backward = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def backward(self):
        return backward(self)

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    if like is not None and np.ndim(x) == 0:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _node(data, parents, backward_fn, op):
    out = Tensor(data)
    out.op = op
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        scale = _faults.get(op)
        if scale is not None:
            inner = backward_fn

            def backward_fn(g, inner=inner):
                return tuple(None if gi is None else gi * scale for gi in inner(g))
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def backward(loss):
    """Reverse accumulation from a scalar; returns ``{leaf tensor: gradient}``.

    Each leaf that requires a gradient also gets its ``grad`` attribute set
    (overwritten, not accumulated).
    """
    if loss.data.size != 1:
        raise DomainError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    nodes, seen, stack = [], set(), [loss]
    while stack:
        t = stack.pop()
        if t.id in seen:
            continue
        seen.add(t.id)
        nodes.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t.id, reverse=True)
    grads = {loss.id: np.ones_like(loss.data)}
    leaves = {}
    for t in nodes:
        g = grads.pop(t.id, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g
            leaves[t] = g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(p.id)
            grads[p.id] = pg if prev is None else prev + pg
    return leaves


# elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def power(a, exponent):
    a = as_tensor(a)
    ad = a.data
    return _node(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "power")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clip(a, lo, hi):
    """Clamp values; the gradient is passed only where the input lies inside [lo, hi]."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _node(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


# activations --------------------------------------------------------------

def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(a):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / SQRT2))
    out = x * cdf

    def grad(g):
        return (g * (cdf + x * INV_SQRT_2PI * np.exp(-0.5 * x * x)),)
    return _node(out.astype(x.dtype, copy=False), (a,), grad, "gelu")


def softmax(a, axis=-1):
    """Softmax along ``axis``; ``-inf`` entries get probability exactly 0."""
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def grad(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
    return _node(out, (a,), grad, "softmax")


def layernorm(x, gamma=None, beta=None, eps=1e-12):
    """Normalise the last axis to zero mean and unit variance, then apply ``gamma``, ``beta``."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    parents = [x]
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        parents.append(gamma)
        out = out * gamma.data
    if beta is not None:
        beta = as_tensor(beta)
        parents.append(beta)
        out = out + beta.data
    lead = tuple(range(xd.ndim - 1))

    def grad(g):
        dxhat = g * gamma.data if gamma is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead).reshape(gamma.shape))
        if beta is not None:
            grads.append(g.sum(axis=lead).reshape(beta.shape))
        return tuple(grads)
    return _node(out, tuple(parents), grad, "layernorm")


def dropout(a, rate, train, seed, site=0):
    """Inverted dropout with a counter-based (Philox) mask keyed by ``(seed, site)``.

    Identity when ``train`` is false or ``rate`` is 0.
    """
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    a = as_tensor(a)
    if not train or rate == 0.0:
        return a
    key = np.array([seed, site], dtype=np.uint64)
    keep = np.random.Generator(np.random.Philox(key=key)).random(a.shape) >= rate
    mask = keep.astype(a.dtype) / (1.0 - rate)
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# linear algebra and shape -------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def grad(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
    return _node(ad @ bd, (a, b), grad, "matmul")


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), grad, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def slice_(a, index):
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(index)

    def grad(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)
    return _node(a.data[index], (a,), grad, "slice")


def embedding(table, indices):
    """Rows of ``table`` selected by an integer array."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError("embedding: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table of {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def grad(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)
    return _node(table.data[idx], (table,), grad, "embedding")


def conv2d(x, w, b=None, stride=1, padding=0):
    """2D cross-correlation: ``x`` (B, C, H, W), ``w`` (O, C, k, k) -> (B, O, Ho, Wo)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, :stride * (Ho - 1) + 1:stride, :stride * (Wo - 1) + 1:stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wmat = w.data.reshape(O, C * k * k)
    out = cols @ wmat.T
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents = (x, w, b)
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def grad(g):
        gf = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (gf.T @ cols).reshape(w.shape)
        dcols = (gf @ wmat).reshape(B, Ho, Wo, C, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = dxp[:, :, padding:padding + H, padding:padding + W]
        if b is None:
            return gx, gw
        return gx, gw, gf.sum(axis=0)
    return _node(np.ascontiguousarray(out), parents, grad, "conv2d")
