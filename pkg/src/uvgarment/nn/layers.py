"""Network building blocks on top of the autodiff engine."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ACTIVATIONS, Value


def fourier_encode(u, num_frequencies):
    """Positional encoding [u, sin(2^k pi u), cos(2^k pi u)], k = 0..F-1.

    Output length is d*(2F+1) on the last axis. F=0 is the identity.
    Works on plain arrays and on Value nodes.
    """
    if num_frequencies < 0:
        raise ValueError("frequency count must be >= 0")
    is_value = isinstance(u, Value)
    if num_frequencies == 0:
        return u
    if is_value:
        parts = [u]
        for k in range(num_frequencies):
            w = (2.0**k) * np.pi
            parts.append(ad.sin(u * w))
        for k in range(num_frequencies):
            w = (2.0**k) * np.pi
            parts.append(ad.cos(u * w))
        return ad.concat(parts, axis=-1)
    u = np.asarray(u, dtype=np.float64)
    freqs = (2.0 ** np.arange(num_frequencies)) * np.pi
    ang = u[..., None, :] * freqs[:, None]  # (..., F, d)
    flat = ang.reshape(*u.shape[:-1], -1)
    return np.concatenate([u, np.sin(flat), np.cos(flat)], axis=-1)


def _fourier_interleaved_dim(d, F):
    return d * (2 * F + 1)


class Parameter(Value):
    """A leaf Value that the optimizer updates."""

    def __init__(self, data):
        super().__init__(np.array(data), requires_grad=True)


def _he_init(rng, fan_in, fan_out, dtype):
    scale = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal((fan_in, fan_out)) * scale).astype(dtype)


class Linear:
    def __init__(self, d_in, d_out, rng, dtype=np.float64):
        self.w = Parameter(_he_init(rng, d_in, d_out, dtype))
        self.b = Parameter(np.zeros(d_out, dtype=dtype))

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b

    def parameters(self):
        return [self.w, self.b]


class Mlp:
    """Stack of dense layers with an optional Fourier input encoding."""

    def __init__(self, d_in, hidden, d_out, rng, activation="relu",
                 fourier_frequencies=0, fourier_dims=None, dtype=np.float64):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.fourier_frequencies = fourier_frequencies
        # only the first `fourier_dims` inputs get encoded; rest pass through
        self.fourier_dims = fourier_dims if fourier_dims is not None else d_in
        eff_in = d_in
        if fourier_frequencies > 0:
            eff_in = d_in - self.fourier_dims + _fourier_interleaved_dim(self.fourier_dims, fourier_frequencies)
        dims = [eff_in] + list(hidden) + [d_out]
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x):
        if self.fourier_frequencies > 0:
            d = self.fourier_dims
            if isinstance(x, Value):
                head = fourier_encode(x[..., :d], self.fourier_frequencies)
                if x.shape[-1] > d:
                    x = ad.concat([head, x[..., d:]], axis=-1)
                else:
                    x = head
            else:
                head = fourier_encode(x[..., :d], self.fourier_frequencies)
                x = np.concatenate([head, x[..., d:]], axis=-1) if x.shape[-1] > d else head
        act = ACTIVATIONS[self.activation]
        h = Value.as_value(x)
        for layer in self.layers[:-1]:
            h = act(layer(h))
        return self.layers[-1](h)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


class Conv2d:
    def __init__(self, c_in, c_out, rng, kernel=3, stride=1, dtype=np.float64):
        fan_in = c_in * kernel * kernel
        scale = np.sqrt(2.0 / fan_in)
        self.w = Parameter((rng.standard_normal((c_out, c_in, kernel, kernel)) * scale).astype(dtype))
        self.b = Parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.pad = kernel // 2

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def parameters(self):
        return [self.w, self.b]


class GroupNorm:
    """Group normalization over channel groups of an NCHW tensor."""

    def __init__(self, channels, groups=8, eps=1e-5, dtype=np.float64):
        groups = min(groups, channels)
        while channels % groups:
            groups -= 1
        self.groups = groups
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def __call__(self, x):
        n, c, h, w = x.shape
        g = self.groups
        xg = ad.reshape(x, (n, g, (c // g) * h * w))
        mu = xg.mean(axis=2, keepdims=True)
        centered = xg - mu
        var = (centered * centered).mean(axis=2, keepdims=True)
        normed = centered / ad.sqrt(var + self.eps)
        normed = ad.reshape(normed, (n, c, h, w))
        gamma = ad.reshape(self.gamma, (1, c, 1, 1))
        beta = ad.reshape(self.beta, (1, c, 1, 1))
        return normed * gamma + beta

    def parameters(self):
        return [self.gamma, self.beta]


class SelfAttention:
    """Single multi-head self-attention layer over (N, L, D) features."""

    def __init__(self, dim, heads, rng, dtype=np.float64):
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.dim = dim
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)

    def __call__(self, x):
        n, length, d = x.shape
        h = self.heads
        hd = d // h

        def split(v):
            v = ad.reshape(v, (n, length, h, hd))
            return ad.transpose(v, (0, 2, 1, 3))  # (n, h, L, hd)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        att = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        att = ad.softmax(att, axis=-1)
        out = ad.matmul(att, v)  # (n, h, L, hd)
        out = ad.transpose(out, (0, 2, 1, 3))
        out = ad.reshape(out, (n, length, d))
        return self.wo(out)

    def parameters(self):
        return [p for lin in (self.wq, self.wk, self.wv, self.wo) for p in lin.parameters()]
