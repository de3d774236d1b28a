"""Reverse-mode automatic differentiation on numpy arrays.

A dynamic tape: every operation returns a new ``Value`` holding the result
array, references to its parents and a closure that routes the output
gradient back to them. ``backward()`` on a scalar output toposorts the graph
and visits each node exactly once, accumulating (summing) gradients at nodes
with several consumers.
"""

from __future__ import annotations

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad, shape):
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


class Value:
    """A node in the computation graph: an array plus optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def as_value(x, dtype=None):
        if isinstance(x, Value):
            return x
        arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
        return Value(arr)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Value(self.data)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------------

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output, got shape %r" % (self.shape,))
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -Value.as_value(other, self.dtype))

    def __rsub__(self, other):
        return add(Value.as_value(other, self.dtype), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(Value.as_value(other, self.dtype), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)


def _make(data, parents, backward):
    """Create a result node, dropping the tape when grads are off/unneeded."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    if not req:
        return Value(data)
    return Value(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


# -- elementwise ops ----------------------------------------------------------


def add(a, b):
    a = Value.as_value(a)
    b = Value.as_value(b, a.dtype)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b):
    a = Value.as_value(a)
    b = Value.as_value(b, a.dtype)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bw)


def div(a, b):
    a = Value.as_value(a)
    b = Value.as_value(b, a.dtype)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), bw)


def power(a, p):
    a = Value.as_value(a)
    p = float(p)
    out_data = a.data**p

    def bw(g):
        if a.requires_grad:
            a._accum(g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), bw)


def exp(a):
    a = Value.as_value(a)
    out_data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g * out_data)

    return _make(out_data, (a,), bw)


def log(a):
    a = Value.as_value(a)
    out_data = np.log(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return _make(out_data, (a,), bw)


def sqrt(a):
    a = Value.as_value(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g * 0.5 / out_data)

    return _make(out_data, (a,), bw)


def sin(a):
    a = Value.as_value(a)
    out_data = np.sin(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g * np.cos(a.data))

    return _make(out_data, (a,), bw)


def cos(a):
    a = Value.as_value(a)
    out_data = np.cos(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(-g * np.sin(a.data))

    return _make(out_data, (a,), bw)


def tanh(a):
    a = Value.as_value(a)
    out_data = np.tanh(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw)


def sigmoid(a):
    a = Value.as_value(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        if a.requires_grad:
            a._accum(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def relu(a):
    a = Value.as_value(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)

    def bw(g):
        if a.requires_grad:
            a._accum(g * mask)

    return _make(out_data, (a,), bw)


def softplus(a):
    a = Value.as_value(a)
    # stable: log(1+exp(x)) = max(x,0) + log1p(exp(-|x|))
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def bw(g):
        if a.requires_grad:
            a._accum(g / (1.0 + np.exp(-a.data)))

    return _make(out_data, (a,), bw)


def gelu(a):
    a = Value.as_value(a)
    # tanh approximation, matching its own analytic derivative below
    c = np.sqrt(2.0 / np.pi)
    inner = c * (a.data + 0.044715 * a.data**3)
    t = np.tanh(inner)
    out_data = 0.5 * a.data * (1.0 + t)

    def bw(g):
        if a.requires_grad:
            dinner = c * (1.0 + 3 * 0.044715 * a.data**2)
            da = 0.5 * (1.0 + t) + 0.5 * a.data * (1.0 - t * t) * dinner
            a._accum(g * da)

    return _make(out_data, (a,), bw)


def absolute(a):
    a = Value.as_value(a)
    out_data = np.abs(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g * np.sign(a.data))

    return _make(out_data, (a,), bw)


# -- reductions and shaping ----------------------------------------------------


def vsum(a, axis=None, keepdims=False):
    a = Value.as_value(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape))
        else:
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.data.shape))

    return _make(out_data, (a,), bw)


def vmean(a, axis=None, keepdims=False):
    a = Value.as_value(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = Value.as_value(a)
    out_data = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    return _make(out_data, (a,), bw)


def transpose(a, axes=None):
    a = Value.as_value(a)
    out_data = np.transpose(a.data, axes)

    def bw(g):
        if a.requires_grad:
            if axes is None:
                a._accum(np.transpose(g))
            else:
                inv = np.argsort(axes)
                a._accum(np.transpose(g, inv))

    return _make(out_data, (a,), bw)


def getitem(a, idx):
    a = Value.as_value(a)
    out_data = a.data[idx]

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

    return _make(out_data, (a,), bw)


def concat(values, axis=0):
    values = [Value.as_value(v) for v in values]
    out_data = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.data.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for v, lo, hi in zip(values, offsets[:-1], offsets[1:]):
            if v.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                v._accum(g[tuple(sl)])

    return _make(out_data, tuple(values), bw)


def matmul(a, b):
    a = Value.as_value(a)
    b = Value.as_value(b, a.dtype)
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), bw)


def softmax(a, axis=-1):
    a = Value.as_value(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accum(out_data * (g - dot))

    return _make(out_data, (a,), bw)


def log_softmax(a, axis=-1):
    a = Value.as_value(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    sm = np.exp(out_data)

    def bw(g):
        if a.requires_grad:
            a._accum(g - sm * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), bw)


# -- 2D convolution stack --------------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    s = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride),
        writeable=False,
    )
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols6[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d(x, w, b=None, stride=1, pad=1):
    """NCHW convolution, kernel 3 (or any square), stride 1 or 2."""
    x = Value.as_value(x)
    w = Value.as_value(w, x.dtype)
    n = x.data.shape[0]
    co, ci, kh, kw = w.data.shape
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(co, ci * kh * kw)
    out_data = (wmat @ cols).reshape(n, co, ho, wo)
    parents = [x, w]
    if b is not None:
        b = Value.as_value(b, x.dtype)
        out_data = out_data + b.data.reshape(1, co, 1, 1)
        parents.append(b)

    def bw(g):
        gmat = g.reshape(n, co, ho * wo)
        if w.requires_grad:
            gw = np.einsum("nop,nkp->ok", gmat, cols)
            w._accum(gw.reshape(w.data.shape))
        if x.requires_grad:
            gcols = wmat.T @ gmat  # (n, ci*kh*kw, ho*wo)
            x._accum(_col2im(gcols, x.data.shape, kh, kw, stride, pad))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))

    return _make(out_data, tuple(parents), bw)


def upsample_nearest2d(x, factor=2):
    x = Value.as_value(x)
    out_data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        if x.requires_grad:
            n, c, h, w = x.data.shape
            gg = g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
            x._accum(gg)

    return _make(out_data, (x,), bw)


ACTIVATIONS = {
    "relu": relu,
    "gelu": gelu,
    "tanh": tanh,
    "softplus": softplus,
    "identity": lambda v: v,
}
