"""Minimal CNN layers with explicit forward/backward passes (NCHW layout).

``forward`` returns ``(output, cache)`` and never stores per-call state on
the layer, so an eval-mode model can be shared between threads. Only
batch-norm running statistics are updated, and only in training mode.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.buffers = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, cache, gy, param_grads=True):
        raise NotImplementedError

    def config(self) -> dict:
        return {"type": type(self).__name__}


class Conv2d(Layer):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, rng=None, dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.padding = kernel, stride, padding
        rng = np.random.default_rng() if rng is None else rng
        fan_in = c_in * kernel * kernel
        self.params["weight"] = (rng.standard_normal((c_out, c_in, kernel, kernel)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["bias"] = np.zeros(c_out, dtype=dtype)

    def config(self):
        return {"type": "Conv2d", "c_in": self.c_in, "c_out": self.c_out, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}

    def output_size(self, n: int) -> int:
        return (n + 2 * self.padding - self.kernel) // self.stride + 1

    def forward(self, x, train=False, rng=None):
        k, s, p = self.kernel, self.stride, self.padding
        B, C, H, W = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        Ho, Wo = self.output_size(H), self.output_size(W)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
        w = self.params["weight"].reshape(self.c_out, -1)
        out = cols @ w.T + self.params["bias"]
        y = out.reshape(B, Ho, Wo, self.c_out).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, x.shape)

    def backward(self, cache, gy, param_grads=True):
        cols, x_shape = cache
        k, s, p = self.kernel, self.stride, self.padding
        B, C, H, W = x_shape
        _, _, Ho, Wo = gy.shape
        g2 = gy.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        grads = {}
        if param_grads:
            grads["weight"] = (g2.T @ cols).reshape(self.params["weight"].shape)
            grads["bias"] = g2.sum(axis=0)
        gcols = (g2 @ self.params["weight"].reshape(self.c_out, -1)).reshape(B, Ho, Wo, C, k, k)
        gxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=gy.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        return gx, grads


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, gy, param_grads=True):
        return gy * cache, {}


class BatchNorm2d(Layer):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def config(self):
        return {"type": "BatchNorm2d", "channels": self.channels, "eps": self.eps, "momentum": self.momentum}

    def forward(self, x, train=False, rng=None):
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            n = x.size // x.shape[1]
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = (1 - m) * rm + m * mean
            rv[...] = (1 - m) * rv + m * var * (n / max(n - 1, 1))
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        return xhat * gamma + beta, (xhat, inv_std, train)

    def backward(self, cache, gy, param_grads=True):
        xhat, inv_std, train = cache
        gamma = self.params["gamma"]
        grads = {}
        if param_grads:
            grads["gamma"] = (gy * xhat).sum(axis=(0, 2, 3))
            grads["beta"] = gy.sum(axis=(0, 2, 3))
        gxhat = gy * gamma[None, :, None, None]
        if not train:
            return gxhat * inv_std[None, :, None, None], grads
        mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        gx = (gxhat - mean_g - xhat * mean_gx) * inv_std[None, :, None, None]
        return gx, grads


class AvgPool2d(Layer):
    """Non-overlapping ``size x size`` average pooling; ragged edges are dropped."""

    def __init__(self, size=2):
        super().__init__()
        self.size = size

    def config(self):
        return {"type": "AvgPool2d", "size": self.size}

    def output_size(self, n: int) -> int:
        return n // self.size

    def forward(self, x, train=False, rng=None):
        k = self.size
        B, C, H, W = x.shape
        Ho, Wo = H // k, W // k
        y = x[:, :, : Ho * k, : Wo * k].reshape(B, C, Ho, k, Wo, k).mean(axis=(3, 5))
        return y, x.shape

    def backward(self, cache, gy, param_grads=True):
        k = self.size
        B, C, H, W = cache
        Ho, Wo = gy.shape[2], gy.shape[3]
        gx = np.zeros((B, C, H, W), dtype=gy.dtype)
        g = np.broadcast_to((gy / (k * k))[:, :, :, None, :, None], (B, C, Ho, k, Wo, k))
        gx[:, :, : Ho * k, : Wo * k] = g.reshape(B, C, Ho * k, Wo * k)
        return gx, {}


class Dropout(Layer):
    def __init__(self, rate=0.3):
        super().__init__()
        self.rate = rate

    def config(self):
        return {"type": "Dropout", "rate": self.rate}

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0:
            return x, None
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, cache, gy, param_grads=True):
        return (gy if cache is None else gy * cache), {}


class GlobalPool(Layer):
    """Average over frequency (axis 2), then maximum over time (axis 3)."""

    def forward(self, x, train=False, rng=None):
        freq_avg = x.mean(axis=2)  # (B, C, T)
        arg = freq_avg.argmax(axis=2)
        y = np.take_along_axis(freq_avg, arg[:, :, None], axis=2)[:, :, 0]
        return y, (x.shape, arg)

    def backward(self, cache, gy, param_grads=True):
        (B, C, H, T), arg = cache
        g_t = np.zeros((B, C, T), dtype=gy.dtype)
        np.put_along_axis(g_t, arg[:, :, None], gy[:, :, None], axis=2)
        gx = np.broadcast_to(g_t[:, :, None, :] / H, (B, C, H, T))
        return np.array(gx), {}


LAYER_TYPES = {cls.__name__: cls for cls in (Conv2d, ReLU, BatchNorm2d, AvgPool2d, Dropout, GlobalPool)}


def build_layer(cfg: dict, dtype=np.float32) -> Layer:
    cfg = dict(cfg)
    kind = cfg.pop("type")
    cls = LAYER_TYPES[kind]
    if cls in (Conv2d, BatchNorm2d):
        return cls(**cfg, dtype=dtype)
    return cls(**cfg)
