"""First-order fast path for ConvNet blocks in channels-last (NHWC) layout.

``ConvNHWC`` runs the convolution as one matrix product over image patches.
``PostConv`` fuses bias, group-wise normalization (instance, layer and group
norm are all per-image group statistics), affine, activation and 2x2 pooling
into one compiled per-image kernel, so an image's activations stay in cache.

Both operators only provide numpy backward passes; they refuse second-order
use, and the generic operators in ``functional`` remain the reference.
"""
from __future__ import annotations

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Function, ShapeError

ACT_CODES = {"none": 0, "relu": 1, "leakyrelu": 2, "sigmoid": 3}
POOL_CODES = {"none": 0, "avg": 1, "max": 2}
LEAKY_SLOPE = 0.01


class FirstOrderFunction(Function):
    second_order = False

    def backward(self, g):
        raise NotImplementedError(f"{type(self).__name__} has no differentiable backward")


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------

def _patches(x, k, padding):
    n, h, w, c = x.shape
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"ConvNHWC: output spatial size would be non-positive for input {x.shape} and kernel {k}")
    if padding:
        xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), x.dtype)
        xp[:, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, -1), (n, ho, wo)


@numba.njit(cache=True)
def _col2im_nhwc(cols, n, h, w, c, k, padding, ho, wo):
    out = np.zeros((n, h, w, c), cols.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                for di in range(k):
                    y = i + di - padding
                    if y < 0 or y >= h:
                        continue
                    for dj in range(k):
                        x = j + dj - padding
                        if x < 0 or x >= w:
                            continue
                        base = (di * k + dj) * c
                        for ch in range(c):
                            out[b, y, x, ch] += cols[row, base + ch]
    return out


class ConvNHWC(FirstOrderFunction):
    """Stride-1 square-kernel cross-correlation; input NHWC, weight OIKK, output NHWC."""

    def forward(self, x, w, padding=1):
        if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[1] or w.shape[2] != w.shape[3]:
            raise ShapeError(f"ConvNHWC: incompatible input {x.shape} and weight {w.shape}")
        self.padding = padding
        self.cols, (n, ho, wo) = _patches(x, w.shape[2], padding)
        self.wm = w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)
        return (self.cols @ self.wm.T).reshape(n, ho, wo, w.shape[0])

    def backward_np(self, g):
        x, w = self.parents
        o, c, k, _ = w.shape
        g2 = g.reshape(-1, o)
        gx = gw = None
        if self.needs[1]:
            gw = np.ascontiguousarray((self.cols.T @ g2).reshape(k, k, c, o).transpose(3, 2, 0, 1))
        if self.needs[0]:
            n, h, wd, _ = x.shape
            gx = _col2im_nhwc(g2 @ self.wm, n, h, wd, c, k, self.padding, g.shape[1], g.shape[2])
        self.cols = None
        return gx, gw


# ----------------------------------------------------------------------
# bias + normalization + affine + activation + pooling
# ----------------------------------------------------------------------

@numba.njit(cache=True, inline="always")
def _act(a, code):
    if code == 1:
        return a if a > 0 else 0.0 * a
    if code == 2:
        return a if a > 0 else 0.01 * a
    if code == 3:
        if a >= 0:
            return 1.0 / (1.0 + np.exp(-a))
        e = np.exp(a)
        return e / (1.0 + e)
    return a


@numba.njit(cache=True, inline="always")
def _act_grad(a, r, code):
    if code == 1:
        return 1.0 if a > 0 else 0.0
    if code == 2:
        return 1.0 if a > 0 else 0.01
    if code == 3:
        return r * (1.0 - r)
    return 1.0


@numba.njit(cache=True)
def _channel_affine(z, bias, gamma, beta, groups, eps, muc, rsc):
    """Per-(image, channel) centre and inverse std so that y = (z - muc) * rsc."""
    n, h, w, c = z.shape
    if groups == 0:
        for b in range(n):
            for ch in range(c):
                muc[b, ch] = -bias[ch]
                rsc[b, ch] = 1.0
        return
    per = c // groups
    cnt = h * w * per
    s = np.zeros(c)
    for b in range(n):
        s[:] = 0.0
        for i in range(h):
            for j in range(w):
                for ch in range(c):
                    s[ch] += z[b, i, j, ch]
        for g in range(groups):
            m = 0.0
            for ch in range(g * per, (g + 1) * per):
                m += s[ch] + h * w * bias[ch]
            m /= cnt
            for ch in range(g * per, (g + 1) * per):
                muc[b, ch] = m - bias[ch]
        s[:] = 0.0
        for i in range(h):
            for j in range(w):
                for ch in range(c):
                    d = z[b, i, j, ch] - muc[b, ch]
                    s[ch] += d * d
        for g in range(groups):
            v = 0.0
            for ch in range(g * per, (g + 1) * per):
                v += s[ch]
            r = 1.0 / np.sqrt(v / cnt + eps)
            for ch in range(g * per, (g + 1) * per):
                rsc[b, ch] = r


@numba.njit(cache=True)
def _post_forward(z, gamma, beta, muc, rsc, act, pool, out, arg):
    n, h, w, c = z.shape
    ho, wo = out.shape[1], out.shape[2]
    sc = np.empty(c, z.dtype)
    sh = np.empty(c, z.dtype)
    for b in range(n):
        for ch in range(c):
            sc[ch] = rsc[b, ch] * gamma[ch]
            sh[ch] = beta[ch] - muc[b, ch] * rsc[b, ch] * gamma[ch]
        if pool == 0:
            for i in range(h):
                for j in range(w):
                    for ch in range(c):
                        out[b, i, j, ch] = _act(z[b, i, j, ch] * sc[ch] + sh[ch], act)
        elif pool == 1:
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        r = _act(z[b, 2 * i, 2 * j, ch] * sc[ch] + sh[ch], act)
                        r += _act(z[b, 2 * i, 2 * j + 1, ch] * sc[ch] + sh[ch], act)
                        r += _act(z[b, 2 * i + 1, 2 * j, ch] * sc[ch] + sh[ch], act)
                        r += _act(z[b, 2 * i + 1, 2 * j + 1, ch] * sc[ch] + sh[ch], act)
                        out[b, i, j, ch] = 0.25 * r
        else:
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        best = _act(z[b, 2 * i, 2 * j, ch] * sc[ch] + sh[ch], act)
                        k = 0
                        r = _act(z[b, 2 * i, 2 * j + 1, ch] * sc[ch] + sh[ch], act)
                        if r > best:
                            best, k = r, 1
                        r = _act(z[b, 2 * i + 1, 2 * j, ch] * sc[ch] + sh[ch], act)
                        if r > best:
                            best, k = r, 2
                        r = _act(z[b, 2 * i + 1, 2 * j + 1, ch] * sc[ch] + sh[ch], act)
                        if r > best:
                            best, k = r, 3
                        out[b, i, j, ch] = best
                        arg[b, i, j, ch] = k


@numba.njit(cache=True)
def _unpool(gout, arg, pool, gz, b):
    h, w, c = gz.shape[1], gz.shape[2], gz.shape[3]
    ho, wo = gout.shape[1], gout.shape[2]
    if pool == 0:
        for i in range(h):
            for j in range(w):
                for ch in range(c):
                    gz[b, i, j, ch] = gout[b, i, j, ch]
        return
    for i in range(h):
        for j in range(w):
            if i >= 2 * ho or j >= 2 * wo:
                for ch in range(c):
                    gz[b, i, j, ch] = 0.0
                continue
            oi, oj = i // 2, j // 2
            if pool == 1:
                for ch in range(c):
                    gz[b, i, j, ch] = 0.25 * gout[b, oi, oj, ch]
            else:
                pos = (i % 2) * 2 + (j % 2)
                for ch in range(c):
                    gz[b, i, j, ch] = gout[b, oi, oj, ch] if arg[b, oi, oj, ch] == pos else 0.0


@numba.njit(cache=True)
def _act_backward(z, sc, sh, act, gz, b):
    h, w, c = z.shape[1], z.shape[2], z.shape[3]
    if act == 1:
        for i in range(h):
            for j in range(w):
                for ch in range(c):
                    if z[b, i, j, ch] * sc[ch] + sh[ch] <= 0:
                        gz[b, i, j, ch] = 0.0
    elif act == 2:
        for i in range(h):
            for j in range(w):
                for ch in range(c):
                    if z[b, i, j, ch] * sc[ch] + sh[ch] <= 0:
                        gz[b, i, j, ch] *= 0.01
    elif act == 3:
        for i in range(h):
            for j in range(w):
                for ch in range(c):
                    r = _act(z[b, i, j, ch] * sc[ch] + sh[ch], 3)
                    gz[b, i, j, ch] *= r * (1.0 - r)


@numba.njit(cache=True)
def _post_backward(gout, z, gamma, beta, muc, rsc, groups, act, pool, arg, gz, gbias, ggamma, gbeta):
    n, h, w, c = z.shape
    per = c // groups if groups > 0 else 1
    cnt = h * w * per
    sc = np.empty(c, z.dtype)
    sh = np.empty(c, z.dtype)
    rs = np.empty(c, z.dtype)
    mu = np.empty(c, z.dtype)
    gm = np.empty(c, z.dtype)
    s1 = np.zeros(c)
    s2 = np.zeros(c)
    m1 = np.zeros(c)
    m2 = np.zeros(c)
    for b in range(n):
        for ch in range(c):
            rs[ch] = rsc[b, ch]
            mu[ch] = muc[b, ch]
            gm[ch] = gamma[ch] if groups > 0 else 1.0
            sc[ch] = rs[ch] * gm[ch]
            sh[ch] = beta[ch] - mu[ch] * sc[ch] if groups > 0 else -mu[ch]
            s1[ch] = 0.0
            s2[ch] = 0.0
        _unpool(gout, arg, pool, gz, b)
        _act_backward(z, sc, sh, act, gz, b)
        if groups == 0:
            for i in range(h):
                for j in range(w):
                    for ch in range(c):
                        gbias[ch] += gz[b, i, j, ch]
            continue
        for i in range(h):
            for j in range(w):
                for ch in range(c):
                    ga = gz[b, i, j, ch]
                    y = (z[b, i, j, ch] - mu[ch]) * rs[ch]
                    gy = ga * gm[ch]
                    ggamma[ch] += ga * y
                    gbeta[ch] += ga
                    s1[ch] += gy
                    s2[ch] += gy * y
                    gz[b, i, j, ch] = gy
        for g in range(groups):
            t1 = 0.0
            t2 = 0.0
            for ch in range(g * per, (g + 1) * per):
                t1 += s1[ch]
                t2 += s2[ch]
            for ch in range(g * per, (g + 1) * per):
                m1[ch] = t1 / cnt
                m2[ch] = t2 / cnt
        for i in range(h):
            for j in range(w):
                for ch in range(c):
                    y = (z[b, i, j, ch] - mu[ch]) * rs[ch]
                    v = rs[ch] * (gz[b, i, j, ch] - m1[ch] - y * m2[ch])
                    gz[b, i, j, ch] = v
                    gbias[ch] += v


class PostConv(FirstOrderFunction):
    """Fused bias, per-image group normalization, affine, activation and 2x2 pooling.

    ``groups`` = 0 disables normalization (``gamma``/``beta`` are then ignored
    dummies); ``groups`` = C is instance norm and 1 is layer norm.
    """

    def forward(self, z, bias, gamma, beta, groups=0, act="relu", pool="avg", eps=1e-5):
        n, h, w, c = z.shape
        if groups and c % groups:
            raise ShapeError(f"PostConv: {c} channels not divisible into {groups} groups")
        self.groups, self.act, self.pool, self.eps = groups, ACT_CODES[act], POOL_CODES[pool], eps
        ho, wo = (h // 2, w // 2) if self.pool else (h, w)
        if ho < 1 or wo < 1:
            raise ShapeError(f"PostConv: 2x2 pooling of a {h}x{w} map")
        self.muc = np.empty((n, c))
        self.rsc = np.empty((n, c))
        _channel_affine(z, bias, gamma, beta, groups, eps, self.muc, self.rsc)
        out = np.empty((n, ho, wo, c), z.dtype)
        self.arg = np.zeros((n, ho, wo, c) if self.pool == 2 else (1, 1, 1, 1), np.uint8)
        _post_forward(z, gamma, beta, self.muc, self.rsc, self.act, self.pool, out, self.arg)
        return out

    def backward_np(self, g):
        z, bias, gamma, beta = (p.data for p in self.parents)
        gz = np.empty_like(z)
        gb, gg, gbeta = np.zeros(z.shape[3]), np.zeros(z.shape[3]), np.zeros(z.shape[3])
        _post_backward(np.ascontiguousarray(g), z, gamma, beta, self.muc, self.rsc, self.groups, self.act,
                       self.pool, self.arg, gz, gb, gg, gbeta)
        dt = z.dtype
        return gz, gb.astype(dt), gg.astype(dt), gbeta.astype(dt)


__all__ = ["ConvNHWC", "PostConv", "ACT_CODES", "POOL_CODES"]
