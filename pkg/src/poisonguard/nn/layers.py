"""Layer descriptors with explicit forward/backward passes.

Tensors are NHWC for images and (N, features) after ``Flatten``.  Every
layer's ``forward`` returns ``(output, cache)`` and ``backward`` consumes the
cache, returning ``(grad_input, param_grads)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _glorot(rng, shape, fan_in, fan_out, dtype):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape).astype(dtype)


def _activate(z, activation):
    if activation == "sigmoid":
        return sigmoid(z)
    if activation == "linear":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def _activation_grad(dout, out, activation):
    if activation == "sigmoid":
        return dout * out * (1.0 - out)
    return dout


class Layer:
    """Base class; parameterless layers inherit the empty defaults."""

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def init_params(self, in_shape, rng, dtype) -> dict:
        return {}

    def forward(self, params, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, params, cache, dout):
        raise NotImplementedError


@dataclass(frozen=True)
class Conv3x3(Layer):
    filters: int
    activation: str = "sigmoid"

    def output_shape(self, in_shape):
        h, w, _ = in_shape
        return (h, w, self.filters)

    def init_params(self, in_shape, rng, dtype):
        cin = in_shape[-1]
        fan_in, fan_out = cin * 9, self.filters * 9
        return {
            "W": _glorot(rng, (cin, 3, 3, self.filters), fan_in, fan_out, dtype),
            "b": np.zeros(self.filters, dtype=dtype),
        }

    def forward(self, params, x, train=False, rng=None):
        n, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        # (n, h, w, c, 3, 3) -> rows ordered (c, kh, kw) to match W's layout
        cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(n * h * w, c * 9)
        wmat = params["W"].reshape(c * 9, self.filters)
        z = cols @ wmat + params["b"]
        out = _activate(z, self.activation).reshape(n, h, w, self.filters)
        return out, (cols, x.shape, out)

    def backward(self, params, cache, dout):
        cols, in_shape, out = cache
        n, h, w, c = in_shape
        dz = _activation_grad(dout, out, self.activation).reshape(n * h * w, self.filters)
        wmat = params["W"].reshape(c * 9, self.filters)
        grads = {
            "W": (cols.T @ dz).reshape(params["W"].shape),
            "b": dz.sum(axis=0),
        }
        dcols = (dz @ wmat.T).reshape(n, h, w, c, 3, 3)
        dxp = np.zeros((n, h + 2, w + 2, c), dtype=dout.dtype)
        for kh in range(3):
            for kw in range(3):
                dxp[:, kh:kh + h, kw:kw + w, :] += dcols[..., kh, kw]
        return dxp[:, 1:-1, 1:-1, :], grads


@dataclass(frozen=True)
class MaxPool2x2(Layer):
    def output_shape(self, in_shape):
        h, w, c = in_shape
        if h % 2 or w % 2:
            raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
        return (h // 2, w // 2, c)

    def forward(self, params, x, train=False, rng=None):
        n, h, w, c = x.shape
        win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        win = win.reshape(n, h // 2, w // 2, c, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, params, cache, dout):
        idx, (n, h, w, c) = cache
        dwin = np.zeros(idx.shape + (4,), dtype=dout.dtype)
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dx = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return dx.reshape(n, h, w, c), {}


@dataclass(frozen=True)
class Upsample2x2(Layer):
    def output_shape(self, in_shape):
        h, w, c = in_shape
        return (2 * h, 2 * w, c)

    def forward(self, params, x, train=False, rng=None):
        return x.repeat(2, axis=1).repeat(2, axis=2), None

    def backward(self, params, cache, dout):
        n, h2, w2, c = dout.shape
        dx = dout.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))
        return dx, {}


@dataclass(frozen=True)
class Flatten(Layer):
    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, dout):
        return dout.reshape(cache), {}


@dataclass(frozen=True)
class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1-rate) during training."""

    rate: float

    def forward(self, params, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            return x, None
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, params, cache, dout):
        if cache is None:
            return dout, {}
        return dout * cache, {}


@dataclass(frozen=True)
class Dense(Layer):
    out_dim: int
    activation: str = "linear"

    def output_shape(self, in_shape):
        return (self.out_dim,)

    def init_params(self, in_shape, rng, dtype):
        (fan_in,) = in_shape
        return {
            "W": _glorot(rng, (fan_in, self.out_dim), fan_in, self.out_dim, dtype),
            "b": np.zeros(self.out_dim, dtype=dtype),
        }

    def forward(self, params, x, train=False, rng=None):
        out = _activate(x @ params["W"] + params["b"], self.activation)
        return out, (x, out)

    def backward(self, params, cache, dout):
        x, out = cache
        dz = _activation_grad(dout, out, self.activation)
        return dz @ params["W"].T, {"W": x.T @ dz, "b": dz.sum(axis=0)}


@dataclass(frozen=True)
class Softmax(Layer):
    def forward(self, params, x, train=False, rng=None):
        e = np.exp(x - x.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        return p, p

    def backward(self, params, cache, dout):
        p = cache
        return p * (dout - (dout * p).sum(axis=1, keepdims=True)), {}


LAYER_TYPES = {
    cls.__name__: cls
    for cls in (Conv3x3, MaxPool2x2, Upsample2x2, Flatten, Dropout, Dense, Softmax)
}
