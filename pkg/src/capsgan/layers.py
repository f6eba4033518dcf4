"""Differentiable layers: convolution, transposed convolution, dense,
leaky ReLU, batch normalization.

Convolution is cross-correlation (no kernel flip).  It is assembled from
tensor primitives only (pad, gather, matmul, reshape), so gradients of any
order come for free, and the transposed convolution is written as the exact
adjoint of the same gather/matmul chain rather than a second geometry.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

BN_EPS = 1e-5

_INDEX_CACHE = {}


def conv_output_size(size, kernel, stride, padding):
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"conv output extent {out} < 1 for input {size}, kernel {kernel}, "
            f"stride {stride}, padding {padding}"
        )
    return out


def _patch_indices(channels, padded_h, padded_w, k_h, k_w, out_h, out_w, stride):
    """Flat indices into a (channels*padded_h*padded_w) axis selecting every
    patch element, ordered (channel, kh, kw) major and (oh, ow) minor."""
    key = (channels, padded_h, padded_w, k_h, k_w, out_h, out_w, stride)
    hit = _INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    c = np.arange(channels).reshape(-1, 1, 1, 1, 1)
    kh = np.arange(k_h).reshape(1, -1, 1, 1, 1)
    kw = np.arange(k_w).reshape(1, 1, -1, 1, 1)
    oh = np.arange(out_h).reshape(1, 1, 1, -1, 1)
    ow = np.arange(out_w).reshape(1, 1, 1, 1, -1)
    idx = c * (padded_h * padded_w) + (oh * stride + kh) * padded_w + (ow * stride + kw)
    idx = np.ascontiguousarray(idx.reshape(-1), dtype=np.int64)
    _INDEX_CACHE[key] = idx
    return idx


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of NCHW input with an (out, in, kH, kW) kernel."""
    n, c, h, w = x.shape
    out_c, in_c, k_h, k_w = kernel.shape
    if in_c != c:
        raise ShapeError(f"conv2d channels: input has {c}, kernel expects {in_c}")
    out_h = conv_output_size(h, k_h, stride, padding)
    out_w = conv_output_size(w, k_w, stride, padding)

    if padding:
        x = T.pad(x, (0, 0, padding, padding), (0, 0, padding, padding))
    ph, pw = h + 2 * padding, w + 2 * padding

    idx = _patch_indices(c, ph, pw, k_h, k_w, out_h, out_w, stride)
    flat = T.reshape(x, (n, c * ph * pw))
    cols = T.reshape(T.gather(flat, idx, axis=1), (n, c * k_h * k_w, out_h * out_w))
    w_mat = T.reshape(kernel, (out_c, c * k_h * k_w))
    out = T.reshape(T.matmul(w_mat, cols), (n, out_c, out_h, out_w))
    if bias is not None:
        out = T.add(out, T.reshape(bias, (1, out_c, 1, 1)))
    return out


def conv2d_transpose(x, kernel, bias=None, stride=1, padding=0):
    """Adjoint of conv2d: maps (n, out, h, w) back through an
    (out, in, kH, kW) kernel to (n, in, H, W) with
    H = (h - 1)*stride - 2*padding + kH."""
    n, c, h, w = x.shape
    out_c, in_c, k_h, k_w = kernel.shape
    if c != out_c:
        raise ShapeError(
            f"conv2d_transpose channels: input has {c}, kernel expects {out_c}"
        )
    big_h = (h - 1) * stride - 2 * padding + k_h
    big_w = (w - 1) * stride - 2 * padding + k_w
    if big_h < 1 or big_w < 1:
        raise ShapeError(f"conv2d_transpose output extent {big_h}x{big_w} < 1")
    ph, pw = big_h + 2 * padding, big_w + 2 * padding

    idx = _patch_indices(in_c, ph, pw, k_h, k_w, h, w, stride)
    w_mat = T.transpose(T.reshape(kernel, (out_c, in_c * k_h * k_w)), (1, 0))
    cols = T.matmul(w_mat, T.reshape(x, (n, out_c, h * w)))
    flat = T.reshape(cols, (n, in_c * k_h * k_w * h * w))
    spread = T.scatter_add(flat, idx, axis=1, size=in_c * ph * pw)
    out = T.reshape(spread, (n, in_c, ph, pw))
    if padding:
        out = T.slice_(
            out,
            (0, 0, padding, padding),
            (n, in_c, padding + big_h, padding + big_w),
        )
    if bias is not None:
        out = T.add(out, T.reshape(bias, (1, in_c, 1, 1)))
    return out


def dense(x, weights, bias=None):
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense shapes: {x.shape} @ {weights.shape}")
    out = T.matmul(x, weights)
    if bias is not None:
        out = T.add(out, T.reshape(bias, (1, weights.shape[1])))
    return out


def leaky_relu(x, slope=0.2):
    pos = T.maximum_with_constant(x, 0.0)
    neg = T.maximum_with_constant(T.mul(x, T.Tensor(np.array(-1.0, dtype=x.data.dtype))), 0.0)
    return T.sub(pos, T.mul(neg, T.Tensor(np.array(slope, dtype=x.data.dtype))))


class BatchNormState:
    """Running statistics for one batchnorm site.  The learned scale and
    shift live in the model's parameter store; this object only carries
    what inference needs besides them."""

    def __init__(self, channels, momentum=0.1, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def state_arrays(self):
        return {"mean": self.mean, "var": self.var}

    def load_arrays(self, arrays):
        self.mean = np.asarray(arrays["mean"], dtype=self.mean.dtype)
        self.var = np.asarray(arrays["var"], dtype=self.var.dtype)


def batchnorm(x, scale, shift, state, train):
    """Per-channel normalization.  NCHW input normalizes over (n, h, w),
    2-d input over the batch axis.  Train mode uses batch moments and
    updates the running statistics; eval mode uses only the stored ones."""
    if x.ndim == 4:
        axes = (0, 2, 3)
        per_channel = (1, x.shape[1], 1, 1)
    elif x.ndim == 2:
        axes = (0,)
        per_channel = (1, x.shape[1])
    else:
        raise ShapeError(f"batchnorm expects rank 2 or 4, got {x.shape}")
    channels = x.shape[1]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise ShapeError(f"batchnorm scale/shift must be ({channels},)")

    if train:
        mean = T.reduce_mean(x, axis=axes, keepdims=True)
        centered = T.sub(x, mean)
        var = T.reduce_mean(T.mul(centered, centered), axis=axes, keepdims=True)
        count = x.size // channels
        bessel = count / (count - 1) if count > 1 else 1.0
        m = state.momentum
        state.mean[:] = (1 - m) * state.mean + m * mean.data.reshape(channels)
        state.var[:] = (1 - m) * state.var + m * bessel * var.data.reshape(channels)
    else:
        mean = Tensor(state.mean.reshape(per_channel), dtype=x.data.dtype)
        var = Tensor(state.var.reshape(per_channel), dtype=x.data.dtype)
        centered = T.sub(x, mean)

    eps = Tensor(np.array(BN_EPS, dtype=x.data.dtype))
    normed = T.div(centered, T.sqrt(T.add(var, eps)))
    return T.add(
        T.mul(normed, T.reshape(scale, per_channel)),
        T.reshape(shift, per_channel),
    )
