"""Minimal float64 layer kernels with explicit backward passes (NCHW layout)."""
from __future__ import annotations

import numpy as np


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def conv2d_forward(x, w, b, stride: int, pad: int):
    """Returns ``(out, cache)``; ``w`` has shape ``(O, C, kh, kw)``."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    cols = np.empty((B, C, kh, kw, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols = cols.reshape(B, C * kh * kw, Ho * Wo)
    out = np.matmul(w.reshape(O, -1), cols) + b[:, None]
    return out.reshape(B, O, Ho, Wo), (cols, x.shape, xp.shape, Ho, Wo)


def conv2d_backward(dout, w, cache, stride: int, pad: int, need_dx: bool = True):
    cols, xshape, xpshape, Ho, Wo = cache
    O, C, kh, kw = w.shape
    B = xshape[0]
    d3 = dout.reshape(B, O, Ho * Wo)
    dw = np.matmul(d3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = d3.sum(axis=(0, 2))
    if not need_dx:
        return None, dw, db
    dcols = np.matmul(w.reshape(O, -1).T, d3).reshape(B, C, kh, kw, Ho, Wo)
    dxp = np.zeros(xpshape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp, dw, db


def relu(x):
    return np.maximum(x, 0.0)


def linear(x, w, b):
    return x @ w + b


def linear_backward(dout, x, w):
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
