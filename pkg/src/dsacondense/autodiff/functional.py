"""Neural-network operators built on the autodiff core.

Convolution, pooling and warping come in closed families (an operator, its
adjoint, and the adjoint's adjoint) so that every backward pass is again
differentiable.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    Function,
    ShapeError,
    Tensor,
    leaky_relu,
    logsumexp,
    maximum,
)

DEFAULT_EPS = 1e-5


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------

def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, k: tuple[int, int], stride: int, padding: int) -> np.ndarray:
    """Columns of shape (N, Ho, Wo, kh, kw, C) for an NCHW input."""
    n, c, h, w = x.shape
    kh, kw = k
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output spatial size would be non-positive for input {x.shape} and kernel {k}")
    xt = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    xt[:, padding : padding + h, padding : padding + w] = x.transpose(0, 2, 3, 1)
    win = sliding_window_view(xt, (kh, kw), axis=(1, 2))[:, : stride * ho : stride, : stride * wo : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _col2im(cols: np.ndarray, in_shape, stride: int, padding: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add columns back to an NCHW array."""
    n, c, h, w = in_shape
    _, ho, wo, kh, kw, _ = cols.shape
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, :, i, j]
    out = out[:, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _check_conv(x_shape, w_shape):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeError(f"conv2d: expected NCHW input and OIKK weight, got {x_shape} and {w_shape}")
    if x_shape[1] != w_shape[1]:
        raise ShapeError(f"conv2d: input has {x_shape[1]} channels but weight expects {w_shape[1]} ({x_shape} vs {w_shape})")


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    """OIKK weight as (O, kh*kw*C), matching the column layout."""
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _conv_np(x: np.ndarray, w: np.ndarray, stride: int, padding: int, cols=None) -> np.ndarray:
    _check_conv(x.shape, w.shape)
    if cols is None:
        cols = _im2col(x, w.shape[2:], stride, padding)
    n, ho, wo = cols.shape[:3]
    out = cols.reshape(n * ho * wo, -1) @ _weight_matrix(w).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))


def _conv_weight_grad_np(x, g, kernel, stride, padding, cols=None):
    if cols is None:
        cols = _im2col(x, kernel, stride, padding)
    o = g.shape[1]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = cols.reshape(gm.shape[0], -1).T @ gm
    return np.ascontiguousarray(gw.reshape(*kernel, x.shape[1], o).transpose(3, 2, 0, 1))


def _conv_input_grad_np(g, w, in_hw, stride, padding):
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    cols = (gm @ _weight_matrix(w)).reshape(n, ho, wo, kh, kw, c)
    return _col2im(cols, (n, c, *in_hw), stride, padding)


class Conv2d(Function):
    """Cross-correlation of an NCHW input with an OIKK weight."""

    def forward(self, x, w, stride=1, padding=0):
        self.stride, self.padding = stride, padding
        _check_conv(x.shape, w.shape)
        self.cols = _im2col(x, w.shape[2:], stride, padding)
        return _conv_np(x, w, stride, padding, self.cols)

    def backward(self, g):
        x, w = self.parents
        gx = Conv2dInputGrad.apply(g, w, in_hw=x.shape[2:], stride=self.stride, padding=self.padding) if self.needs[0] else None
        gw = Conv2dWeightGrad.apply(x, g, kernel=w.shape[2:], stride=self.stride, padding=self.padding) if self.needs[1] else None
        return gx, gw

    def backward_np(self, g):
        x, w = self.parents
        gx = _conv_input_grad_np(g, w.data, x.shape[2:], self.stride, self.padding) if self.needs[0] else None
        gw = _conv_weight_grad_np(x.data, g, w.shape[2:], self.stride, self.padding, self.cols) if self.needs[1] else None
        self.cols = None
        return gx, gw


class Conv2dInputGrad(Function):
    """Adjoint of ``Conv2d`` in its input: a transposed convolution."""

    def forward(self, g, w, in_hw, stride, padding):
        self.in_hw, self.stride, self.padding = tuple(in_hw), stride, padding
        return _conv_input_grad_np(g, w, self.in_hw, stride, padding)

    def backward(self, u):
        g, w = self.parents
        gg = Conv2d.apply(u, w, stride=self.stride, padding=self.padding) if self.needs[0] else None
        gw = Conv2dWeightGrad.apply(u, g, kernel=w.shape[2:], stride=self.stride, padding=self.padding) if self.needs[1] else None
        return gg, gw


class Conv2dWeightGrad(Function):
    """Adjoint of ``Conv2d`` in its weight."""

    def forward(self, x, g, kernel, stride, padding):
        self.kernel, self.stride, self.padding = tuple(kernel), stride, padding
        return _conv_weight_grad_np(x, g, self.kernel, stride, padding)

    def backward(self, u):
        x, g = self.parents
        gx = Conv2dInputGrad.apply(g, u, in_hw=x.shape[2:], stride=self.stride, padding=self.padding) if self.needs[0] else None
        gg = Conv2d.apply(x, u, stride=self.stride, padding=self.padding) if self.needs[1] else None
        return gx, gg


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    out = Conv2d.apply(x, weight, stride=stride, padding=padding)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored (out, in)."""
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


# ----------------------------------------------------------------------
# pooling
# ----------------------------------------------------------------------

def _pool_out(x, k):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool2d: window {k} larger than input {x.shape}")
    return ho, wo


def _window(x, k, i, j, ho, wo):
    return x[:, :, i : i + k * ho : k, j : j + k * wo : k]


def _avgpool_np(x, k):
    ho, wo = _pool_out(x, k)
    out = np.zeros(x.shape[:2] + (ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += _window(x, k, i, j, ho, wo)
    out *= 1.0 / (k * k)
    return out


def _avgpool_grad_np(g, k, in_shape):
    ho, wo = g.shape[2:]
    out = np.zeros(in_shape, dtype=g.dtype)
    gk = g * (1.0 / (k * k))
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + k * ho : k, j : j + k * wo : k] = gk
    return out


class AvgPool2d(Function):
    """Non-overlapping average pooling; trailing rows/cols are dropped."""

    def forward(self, x, k=2):
        self.k = k
        return _avgpool_np(x, k)

    def backward(self, g):
        (x,) = self.parents
        return (AvgPool2dGrad.apply(g, k=self.k, in_shape=x.shape),)

    def backward_np(self, g):
        (x,) = self.parents
        return (_avgpool_grad_np(g, self.k, x.shape),)


class AvgPool2dGrad(Function):
    def forward(self, g, k, in_shape):
        self.k = k
        return _avgpool_grad_np(g, k, in_shape)

    def backward(self, u):
        return (AvgPool2d.apply(u, k=self.k),)


def _max_windows(x, k):
    ho, wo = _pool_out(x, k)
    return np.stack([_window(x, k, i, j, ho, wo) for i in range(k) for j in range(k)], axis=-1)


class MaxPool2d(Function):
    """Max pooling; ties go to the first element in row-major window order."""

    def forward(self, x, k=2):
        self.k = k
        flat = _max_windows(x, k)
        self.index = flat.argmax(axis=-1)[..., None]
        return np.take_along_axis(flat, self.index, axis=-1)[..., 0]

    def backward(self, g):
        (x,) = self.parents
        return (MaxPoolScatter.apply(g, index=self.index, k=self.k, in_shape=x.shape),)

    def backward_np(self, g):
        (x,) = self.parents
        return (_maxpool_scatter_np(g, self.index, self.k, x.shape),)


def _maxpool_scatter_np(g, index, k, in_shape):
    ho, wo = g.shape[2:]
    out = np.zeros(in_shape, dtype=g.dtype)
    idx = index[..., 0]
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + k * ho : k, j : j + k * wo : k] = np.where(idx == i * k + j, g, 0)
    return out


def _maxpool_gather_np(u, index, k):
    return np.take_along_axis(_max_windows(u, k), index, axis=-1)[..., 0]


class MaxPoolScatter(Function):
    def forward(self, g, index, k, in_shape):
        self.index, self.k = index, k
        return _maxpool_scatter_np(g, index, k, in_shape)

    def backward(self, u):
        return (MaxPoolGather.apply(u, index=self.index, k=self.k),)


class MaxPoolGather(Function):
    def forward(self, u, index, k):
        self.index, self.k = index, k
        self.in_shape = u.shape
        return _maxpool_gather_np(u, index, k)

    def backward(self, g):
        return (MaxPoolScatter.apply(g, index=self.index, k=self.k, in_shape=self.in_shape),)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    return AvgPool2d.apply(x, k=k)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    return MaxPool2d.apply(x, k=k)


# ----------------------------------------------------------------------
# normalization
# ----------------------------------------------------------------------

class Standardize(Function):
    """(x - mean) / sqrt(var + eps) over ``axes`` (biased variance)."""

    def forward(self, x, axes, eps):
        self.axes, self.eps = axes, eps
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        return xc * self.rstd

    def backward(self, g):
        (x,) = self.parents
        y = Standardize.apply(x, axes=self.axes, eps=self.eps)
        xc = x - x.mean(axis=self.axes, keepdims=True)
        rstd = ((xc * xc).mean(axis=self.axes, keepdims=True) + self.eps) ** -0.5
        gx = (g - g.mean(axis=self.axes, keepdims=True) - y * (g * y).mean(axis=self.axes, keepdims=True)) * rstd
        return (gx,)

    def backward_np(self, g):
        y = self.output
        gm = g.mean(axis=self.axes, keepdims=True)
        gym = (g * y).mean(axis=self.axes, keepdims=True)
        return ((g - gm - y * gym) * self.rstd,)


def standardize(x: Tensor, axes, eps: float = DEFAULT_EPS) -> Tensor:
    return Standardize.apply(x, axes=tuple(axes), eps=eps)


def _affine(y: Tensor, weight: Tensor | None, bias: Tensor | None) -> Tensor:
    if weight is not None:
        y = y * weight.reshape(1, -1, 1, 1)
    if bias is not None:
        y = y + bias.reshape(1, -1, 1, 1)
    return y


def instance_norm(x: Tensor, weight=None, bias=None, eps: float = DEFAULT_EPS) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"instance_norm: expected NCHW input, got {x.shape}")
    return _affine(standardize(x, (2, 3), eps), weight, bias)


def layer_norm(x: Tensor, weight=None, bias=None, eps: float = DEFAULT_EPS) -> Tensor:
    """Normalizes each sample over (C, H, W); per-channel affine."""
    return _affine(standardize(x, (1, 2, 3), eps), weight, bias)


def group_norm(x: Tensor, groups: int, weight=None, bias=None, eps: float = DEFAULT_EPS) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    y = standardize(x.reshape(n, groups, c // groups, h * w), (2, 3), eps).reshape(n, c, h, w)
    return _affine(y, weight, bias)


def batch_norm(
    x: Tensor,
    weight=None,
    bias=None,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = DEFAULT_EPS,
) -> Tensor:
    """Batch statistics when training (running buffers updated in place)."""
    if training:
        if running_mean is not None:
            m = x.data.mean(axis=(0, 2, 3))
            count = x.shape[0] * x.shape[2] * x.shape[3]
            v = x.data.var(axis=(0, 2, 3)) * (count / max(count - 1, 1))
            running_mean *= 1 - momentum
            running_mean += momentum * m
            running_var *= 1 - momentum
            running_var += momentum * v
        y = standardize(x, (0, 2, 3), eps)
    else:
        mean = running_mean.reshape(1, -1, 1, 1).astype(x.dtype)
        rstd = (1.0 / np.sqrt(running_var + eps)).reshape(1, -1, 1, 1).astype(x.dtype)
        y = (x - Tensor(mean)) * Tensor(rstd)
    return _affine(y, weight, bias)


# ----------------------------------------------------------------------
# activations and losses
# ----------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def log_softmax(logits: Tensor) -> Tensor:
    return logits - logsumexp(logits, axis=1)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0 / n
    return -(log_softmax(logits) * Tensor(onehot)).sum()


# ----------------------------------------------------------------------
# linear spatial resampling (warps with a fixed sampling grid)
# ----------------------------------------------------------------------

class SpatialMap(Function):
    """Applies a fixed sparse (HW_out x HW_in) matrix to every channel plane."""

    def forward(self, x, matrix, out_hw):
        self.matrix, self.out_hw = matrix, out_hw
        n, c, h, w = x.shape
        if matrix.shape[1] != h * w:
            raise ShapeError(f"SpatialMap: matrix {matrix.shape} does not match input plane {h}x{w}")
        flat = x.reshape(n * c, h * w)
        out = np.asarray((matrix @ flat.T).T, dtype=x.dtype)
        return out.reshape(n, c, *out_hw)

    def backward(self, g):
        (x,) = self.parents
        return (SpatialMap.apply(g, matrix=self.matrix.T.tocsr(), out_hw=x.shape[2:]),)


def bilinear_matrix(src_y: np.ndarray, src_x: np.ndarray, in_hw) -> sp.csr_matrix:
    """Sparse bilinear-interpolation matrix sampling an ``in_hw`` plane.

    ``src_y``/``src_x`` hold one source coordinate (pixel units, pixel centers
    at integers) per output pixel.  Taps outside the source read zero.
    """
    h, w = in_hw
    sy, sx = src_y.reshape(-1), src_x.reshape(-1)
    y0, x0 = np.floor(sy), np.floor(sx)
    fy, fx = sy - y0, sx - x0
    rows, cols, vals = [], [], []
    out_idx = np.arange(sy.size)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            weight = wy * wx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w) & (weight != 0)
            rows.append(out_idx[ok])
            cols.append((yy[ok] * w + xx[ok]).astype(np.int64))
            vals.append(weight[ok])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(sy.size, h * w),
    )


def grid_sample(x: Tensor, src_y: np.ndarray, src_x: np.ndarray) -> Tensor:
    """Bilinear sampling at constant source coordinates (no gradient to the grid)."""
    matrix = bilinear_matrix(src_y, src_x, x.shape[2:])
    return SpatialMap.apply(x, matrix=matrix, out_hw=tuple(src_y.shape))


__all__ = [
    "avg_pool2d",
    "batch_norm",
    "bilinear_matrix",
    "conv2d",
    "flatten",
    "grid_sample",
    "group_norm",
    "instance_norm",
    "layer_norm",
    "leaky_relu",
    "linear",
    "log_softmax",
    "max_pool2d",
    "maximum",
    "relu",
    "sigmoid",
    "softmax_cross_entropy",
    "standardize",
]
