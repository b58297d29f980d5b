"""Dense tensors with reverse-mode automatic differentiation.

A dynamic tape is rebuilt on every forward pass: each op records its
parents and a closure that maps the output gradient to parent gradients.
``backward()`` on a scalar walks the tape in reverse topological order and
accumulates into ``.grad`` (repeated calls accumulate until grads are
zeroed).

Values are numpy arrays, float32 by default; verification suites run
everything at float64.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


class Rng:
    """Deterministic random source: PCG64 seeded with a 64-bit integer.

    Identical seeds produce bit-identical sample streams across runs and
    platforms (numpy's PCG64 is platform-stable).
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, std=1.0, dtype=DEFAULT_DTYPE):
        return (self._gen.standard_normal(size=shape) * std).astype(dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=DEFAULT_DTYPE):
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, seq):
        return seq[int(self._gen.integers(0, len(seq)))]

    def shuffle(self, seq):
        self._gen.shuffle(seq)

    def child(self, key):
        """Derive an independent stream; same (seed, key) => same stream."""
        return Rng(np.random.SeedSequence([self.seed, int(key)]).generate_state(1)[0])


class Tensor:
    """A dense n-d array participating in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _op(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo, seen = [], set()
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- arithmetic ----------------------------------------------------------------


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}") from e
    return Tensor._op(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e
    return Tensor._op(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    data = a.data**p
    return Tensor._op(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._op(data, (a, b), backward)


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    inv = tuple(np.argsort(axes))
    return Tensor._op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def reshape(a, shape):
    a = _as_tensor(a)
    return Tensor._op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._op(data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def concat_lastdim(a, b):
    """Concat(A, B) along the hidden dimension."""
    return concat([a, b], axis=-1)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return Tensor._op(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_over_rows(a):
    """Average along the length-N axis (second to last)."""
    return tmean(a, axis=-2)


def broadcast_rows(v, n):
    """1_{N x 1} @ v : repeat a (..., 1, d) row vector N times."""
    v = _as_tensor(v)
    ones = Tensor(np.ones((n, 1), dtype=v.dtype))
    return matmul(ones, v)


def broadcast_cols(u, d):
    """u @ 1_{1 x d} : repeat a (..., N, 1) column vector d times."""
    u = _as_tensor(u)
    ones = Tensor(np.ones((1, d), dtype=u.dtype))
    return matmul(u, ones)


# -- nonlinearities ------------------------------------------------------------


def sigmoid(a):
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor._op(y, (a,), lambda g: (g * y * (1.0 - y),))


def gelu(a):
    """Exact Gaussian-error-function GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    y = x * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return Tensor._op(y, (a,), backward)


def texp(a):
    a = _as_tensor(a)
    y = np.exp(a.data)
    return Tensor._op(y, (a,), lambda g: (g * y,))


def tlog(a):
    a = _as_tensor(a)
    return Tensor._op(np.log(a.data), (a,), lambda g: (g / a.data,))


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._op(y, (a,), backward)


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._op(y, (a,), backward)


def take_rows(w, idx):
    """Row gather w[idx] (embedding lookup); gradient scatter-adds."""
    w = _as_tensor(w)
    idx = np.asarray(idx)
    data = w.data[idx]

    def backward(g):
        gw = np.zeros_like(w.data)
        np.add.at(gw, idx, g)
        return (gw,)

    return Tensor._op(data, (w,), backward)


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "concat_lastdim": concat_lastdim,
    "mean_over_rows": mean_over_rows,
    "broadcast_rows": broadcast_rows,
    "broadcast_cols": broadcast_cols,
}


def elementwise(op, *args):
    """Dispatch one of the named elementwise/broadcast ops by name."""
    if op not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {op!r}")
    return _ELEMENTWISE[op](*args)


def parameter(data, requires_grad=True, name=None):
    """A leaf tensor intended to be trained."""
    t = Tensor(data, requires_grad=requires_grad, name=name)
    return t
