"""Reverse-mode automatic differentiation on dense numpy arrays.

Define-by-run: every op records its parents and vector-Jacobian closures on
the output tensor; ``Tensor.backward()`` walks the recorded graph in reverse
topological order. Shapes are dynamic, which the sequence encoder needs
(frame counts vary per sample).

All tensors are float64 by default; call :func:`set_default_dtype` for the
float32 timing mode. Randomness (dropout) is injected through explicit
``numpy.random.Generator`` objects, never global state.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import _kernels
from .errors import ShapeError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715
NEG_INF = -1e30  # finite mask value; exp() underflows to exactly 0


def set_default_dtype(dtype):
    """Switch the dtype used for tensors built from python data ("float32"/"float64")."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation/generation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps", "name")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(_DEFAULT_DTYPE)
        elif arr.dtype.kind == "f" and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjps = ()
        self.name = name

    # -- introspection -------------------------------------------------
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

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate gradients of ``self`` into every reachable leaf."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without an explicit seed needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and (p.requires_grad or p._parents):
                    stack.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if vjp is None or not (parent.requires_grad or parent._parents):
                    continue
                contrib = vjp(g)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, vjps):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _make(data, (a, b), (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return _make(
        data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def reciprocal(a):
    a = as_tensor(a)
    inv = 1.0 / a.data
    return _make(inv, (a,), (lambda g: -g * inv * inv,))


def exp(a):
    a = as_tensor(a)
    e = np.exp(a.data)
    return _make(e, (a,), (lambda g: g * e,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), (lambda g: g / a.data,))


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), (lambda g: g * (1.0 - t * t),))


def cos(a):
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), (lambda g: -g * np.sin(a.data),))


def sqrt(a):
    a = as_tensor(a)
    r = np.sqrt(a.data)
    return _make(r, (a,), (lambda g: g * 0.5 / r,))


def gelu(a):
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_C * (x * x * x))
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)

    return _make(y, (a,), (vjp,))


# -- shape manipulation ------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), (lambda g: g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), (lambda g: np.transpose(g, inv),))


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), (lambda g: np.swapaxes(g, ax1, ax2),))


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    return _make(data, tuple(ts), tuple(make_vjp(i) for i in range(len(ts))))


def take(a, key):
    """Basic indexing/slicing; gradient scatters back into a zero tensor."""
    a = as_tensor(a)
    data = a.data[key]

    def vjp(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return out

    return _make(data, (a,), (vjp,))


# -- reductions --------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy() if np.ndim(g) == 0 else np.full(a.shape, g)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return _make(data, (a,), (vjp,))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra ----------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = a.data @ b.data

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)

    return _make(data, (a, b), (vjp_a, vjp_b))


# -- normalization and activations over rows ----------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return y * (g - dot)

    return _make(y, (a,), (vjp,))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma.data * xhat + beta.data

    def vjp_x(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)

    def vjp_gamma(g):
        return (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)

    def vjp_beta(g):
        return g.reshape(-1, x.shape[-1]).sum(axis=0)

    return _make(y, (x, gamma, beta), (vjp_x, vjp_gamma, vjp_beta))


def dropout(x, p, rng):
    """Inverted dropout with an explicit generator. ``p=0`` is the identity."""
    x = as_tensor(x)
    if p < 0.0 or p >= 1.0:
        raise ValueError(f"dropout probability out of range: {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * mask, (x,), (lambda g: g * mask,))


# -- lookups and gather/scatter -----------------------------------------

def embedding_lookup(table, ids):
    """Rows of ``table`` selected by integer array ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def vjp(g):
        out = np.zeros_like(table.data)
        _kernels.scatter_add_rows(out, ids.reshape(-1), np.ascontiguousarray(g.reshape(-1, table.shape[-1])))
        return out

    return _make(data, (table,), (vjp,))


def gather_rows(x, index):
    """x[index] along axis 0; duplicates allowed, gradient accumulates."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    data = x.data[index]
    rest = int(np.prod(x.shape[1:], dtype=np.int64)) if x.ndim > 1 else 1

    def vjp(g):
        out = np.zeros_like(x.data)
        _kernels.scatter_add_rows(
            out.reshape(x.shape[0], rest), index, np.ascontiguousarray(g.reshape(len(index), rest))
        )
        return out

    return _make(data, (x,), (vjp,))


def scatter_rows(src, index, n_rows):
    """Accumulate rows of ``src`` into a fresh (n_rows, ...) zero tensor."""
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.int64)
    rest_shape = src.shape[1:]
    rest = int(np.prod(rest_shape, dtype=np.int64)) if rest_shape else 1
    out = np.zeros((n_rows,) + rest_shape, dtype=src.dtype)
    _kernels.scatter_add_rows(
        out.reshape(n_rows, rest), index, np.ascontiguousarray(src.data.reshape(len(index), rest))
    )

    def vjp(g):
        return g[index]

    return _make(out, (src,), (vjp,))


def segment_sum(x, seg, n_seg):
    """Sum rows of ``x`` grouped by segment id (axis 0)."""
    x = as_tensor(x)
    seg = np.asarray(seg, dtype=np.int64)
    rest_shape = x.shape[1:]
    rest = int(np.prod(rest_shape, dtype=np.int64)) if rest_shape else 1
    data = _kernels.segment_sum(np.ascontiguousarray(x.data.reshape(len(seg), rest)), seg, n_seg)
    data = data.reshape((n_seg,) + rest_shape)

    def vjp(g):
        return g[seg]

    return _make(data, (x,), (vjp,))


def segment_mean(x, seg, n_seg):
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_seg).astype(as_tensor(x).dtype)
    counts = np.maximum(counts, 1.0)
    inv = (1.0 / counts).reshape((n_seg,) + (1,) * (np.ndim(x.data if isinstance(x, Tensor) else x) - 1))
    return mul(segment_sum(x, seg, n_seg), inv)


def segment_softmax(scores, seg, n_seg):
    """Softmax over rows of ``scores`` within each segment (feature-wise).

    ``scores`` is (E, H); each column h is normalized independently across
    the rows sharing a segment id. Empty segments never appear in outputs.
    """
    scores = as_tensor(scores)
    seg = np.asarray(seg, dtype=np.int64)
    s = np.ascontiguousarray(scores.data)
    mx = _kernels.segment_max(s, seg, n_seg)
    z = np.exp(s - mx[seg])
    denom = _kernels.segment_sum(z, seg, n_seg)
    y = z / denom[seg]

    def vjp(g):
        dot = _kernels.segment_sum(np.ascontiguousarray(y * g), seg, n_seg)
        return y * (g - dot[seg])

    return _make(y, (scores,), (vjp,))


def rotate_pairs(a):
    """(x0, x1) -> (-x1, x0) on consecutive feature pairs of the last axis."""
    a = as_tensor(a)
    if a.shape[-1] % 2 != 0:
        raise ShapeError("rotate_pairs", a.shape)
    x = a.data.reshape(a.shape[:-1] + (-1, 2))
    y = np.empty_like(x)
    y[..., 0] = -x[..., 1]
    y[..., 1] = x[..., 0]
    y = y.reshape(a.shape)

    def vjp(g):
        gp = g.reshape(a.shape[:-1] + (-1, 2))
        out = np.empty_like(gp)
        out[..., 0] = gp[..., 1]
        out[..., 1] = -gp[..., 0]
        return out.reshape(a.shape)

    return _make(y, (a,), (vjp,))


# -- losses --------------------------------------------------------------

def cross_entropy(logits, targets, weights=None):
    """Cross-entropy from raw logits.

    ``logits`` is (N, V), ``targets`` (N,) int. With ``weights=None`` the
    result is the mean over rows; otherwise the weighted sum.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    n, _ = logits.shape
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    per_row = lse - logits.data[np.arange(n), targets]
    w = np.full(n, 1.0 / n, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    loss = float((per_row * w).sum())

    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), targets] -= 1.0
        return d * (w * float(g))[:, None]

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), (vjp,))


# -- parameter helpers ---------------------------------------------------

def param(data, name=None):
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)


def glorot(rng, fan_in, fan_out, shape=None, name=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = shape if shape is not None else (fan_in, fan_out)
    return param(rng.uniform(-limit, limit, size=shape), name=name)


def zeros(shape, name=None):
    return param(np.zeros(shape), name=name)


def ones(shape, name=None):
    return param(np.ones(shape), name=name)
