"""Minimal numpy layers with hand-derived backpropagation.

Every layer exposes forward(...) -> (out, cache) and backward(dout, cache)
-> input gradients; parameter gradients accumulate into Param.grad so one
training step can touch a parameter through several call sites. All math is
float64 so finite-difference checks are meaningful.
"""

from __future__ import annotations

import numpy as np


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


class Module:
    """Tree of submodules / Params with flat named access."""

    def _children(self):
        def walk(name, obj):
            if isinstance(obj, (Param, Module)):
                yield name, obj
            elif isinstance(obj, (list, tuple)):
                for i, o in enumerate(obj):
                    yield from walk(f"{name}.{i}", o)

        for name, obj in vars(self).items():
            yield from walk(name, obj)

    def named_params(self, prefix=""):
        out = []
        for name, obj in self._children():
            full = f"{prefix}{name}"
            if isinstance(obj, Param):
                out.append((full, obj))
            else:
                out.extend(obj.named_params(full + "."))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0.0

    def state_dict(self):
        return {name: p.value.copy() for name, p in self.named_params()}

    def load_state_dict(self, d):
        for name, p in self.named_params():
            v = np.asarray(d[name], dtype=np.float64)
            if v.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.value = v.copy()
            p.grad = np.zeros_like(p.value)


class Linear(Module):
    def __init__(self, din, dout, rng, scale=None):
        s = scale if scale is not None else 1.0 / np.sqrt(din)
        self.w = Param(rng.normal(0.0, s, size=(din, dout)))
        self.b = Param(np.zeros(dout))

    def forward(self, x):
        return x @ self.w.value + self.b.value, x

    def backward(self, dout, cache):
        x = cache
        self.w.grad += x.T @ dout
        self.b.grad += dout.sum(axis=0)
        return dout @ self.w.value.T


class Conv2d(Module):
    """3x3 (or kxk) same-padding convolution on (N, C, H, W) tensors."""

    def __init__(self, cin, cout, rng, ksize=3, scale=None):
        self.ksize = ksize
        s = scale if scale is not None else 1.0 / np.sqrt(cin * ksize * ksize)
        self.w = Param(rng.normal(0.0, s, size=(cout, cin, ksize, ksize)))
        self.b = Param(np.zeros(cout))

    def forward(self, x):
        k = self.ksize
        p = k // 2
        n, c, hh, ww = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cout = self.w.value.shape[0]
        y = np.empty((n, cout, hh, ww))
        y[...] = self.b.value[None, :, None, None]
        for di in range(k):
            for dj in range(k):
                # (cout, cin) x (n, cin, H, W) -> (cout, n, H, W)
                y += np.tensordot(self.w.value[:, :, di, dj],
                                  xp[:, :, di:di + hh, dj:dj + ww],
                                  axes=(1, 1)).transpose(1, 0, 2, 3)
        return y, xp

    def backward(self, dout, cache):
        xp = cache
        k = self.ksize
        p = k // 2
        n, cout, hh, ww = dout.shape
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                patch = xp[:, :, di:di + hh, dj:dj + ww]
                self.w.grad[:, :, di, dj] += np.tensordot(
                    dout, patch, axes=([0, 2, 3], [0, 2, 3]))
                dxp[:, :, di:di + hh, dj:dj + ww] += np.tensordot(
                    self.w.value[:, :, di, dj], dout,
                    axes=(0, 1)).transpose(1, 0, 2, 3)
        self.b.grad += dout.sum(axis=(0, 2, 3))
        if p == 0:
            return dxp
        return dxp[:, :, p:-p, p:-p]


def silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def silu_backward(dout, cache):
    x, s = cache
    return dout * s * (1.0 + x * (1.0 - s))


def avgpool2(x):
    n, c, h, w = x.shape
    y = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return y, x.shape


def avgpool2_backward(dout, cache):
    n, c, h, w = cache
    up = np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3)
    return up * 0.25


def upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), x.shape


def upsample2_backward(dout, cache):
    n, c, h, w = cache
    return dout.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


def global_mean_pool(x):
    n, c, h, w = x.shape
    return x.mean(axis=(2, 3)), x.shape


def global_mean_pool_backward(dout, cache):
    n, c, h, w = cache
    return np.broadcast_to(dout[:, :, None, None] / (h * w),
                           (n, c, h, w)).copy()


def film(x, gamma, delta):
    """Per-channel affine modulation y = x*(1+gamma) + delta, gamma (N, C)."""
    y = x * (1.0 + gamma)[:, :, None, None] + delta[:, :, None, None]
    return y, (x, gamma)


def film_backward(dout, cache):
    x, gamma = cache
    dx = dout * (1.0 + gamma)[:, :, None, None]
    dgamma = (dout * x).sum(axis=(2, 3))
    ddelta = dout.sum(axis=(2, 3))
    return dx, dgamma, ddelta


def pixel_unshuffle_batch(x, r):
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ValueError(f"spatial dims {(h, w)} not divisible by r={r}")
    y = x.reshape(n, c, h // r, r, w // r, r)
    y = y.transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(n, c * r * r, h // r, w // r))


def pixel_shuffle_batch(x, r):
    n, cr2, hh, ww = x.shape
    if cr2 % (r * r):
        raise ValueError("channel count not divisible by r^2")
    c = cr2 // (r * r)
    y = x.reshape(n, c, r, r, hh, ww)
    y = y.transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, c, hh * r, ww * r))


class Adam:
    """Adaptive-moment estimation on a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
