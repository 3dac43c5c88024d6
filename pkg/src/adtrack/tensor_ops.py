"""Dense tensor kernels for the tracker: conv, pooling, normalization, softmax.

Tensors are plain float64 ``numpy`` arrays. Maps and images are laid out as
``(channels, height, width)``; convolution filters as
``(c_out, c_in, kh, kw)``. Every op is a pure function; each op that
participates in training has a matching ``*_backward`` companion computing
the vector-Jacobian product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

VAR_GUARD = 1e-12  # below this a channel is treated as constant


@dataclass(frozen=True)
class ConvSpec:
    """One convolution layer: kernel (c_out, c_in, kh, kw), optional bias."""

    kernel: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ContractViolation(f"kernel must be 4-d, got shape {self.kernel.shape}")
        kh, kw = self.kernel.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ContractViolation(f"kernel extents must be odd, got {kh}x{kw}")
        if self.stride < 1:
            raise ContractViolation(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ContractViolation(f"padding must be non-negative, got {self.padding}")
        if self.bias is not None and self.bias.shape != (self.kernel.shape[0],):
            raise ContractViolation(
                f"bias shape {self.bias.shape} does not match c_out {self.kernel.shape[0]}"
            )


def _out_extent(n, k, stride, padding):
    span = n + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ContractViolation(
            f"extent {n} with kernel {k}, stride {stride}, padding {padding} "
            "does not yield an integral positive output extent"
        )
    return span // stride + 1


def _im2col(x, kh, kw, stride, padding):
    """Unfold (C,H,W) into (H_out*W_out, C*kh*kw) patch rows."""
    c, h, w = x.shape
    ho = _out_extent(h, kh, stride, padding)
    wo = _out_extent(w, kw, stride, padding)
    if padding:
        xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, padding:padding + h, padding:padding + w] = x
    else:
        xp = x
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, ho, wo, kh, kw),
        strides=(s0, s1 * stride, s2 * stride, s1, s2),
        writeable=False,
    )
    return win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * kh * kw), (ho, wo)


def _col2im(cols, x_shape, kh, kw, stride, padding):
    """Scatter-add patch rows back onto an input-shaped array (im2col adjoint)."""
    c, h, w = x_shape
    ho = _out_extent(h, kh, stride, padding)
    wo = _out_extent(w, kw, stride, padding)
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    patches = cols.reshape(ho, wo, c, kh, kw).transpose(2, 0, 1, 3, 4)
    for dy in range(kh):
        for dx in range(kw):
            xp[:, dy:dy + ho * stride:stride, dx:dx + wo * stride:stride] += patches[:, :, :, dy, dx]
    if padding:
        return xp[:, padding:padding + h, padding:padding + w]
    return xp


def _conv_raw(x, kernel, bias, stride, padding):
    c_out = kernel.shape[0]
    cols, (ho, wo) = _im2col(x, kernel.shape[2], kernel.shape[3], stride, padding)
    out = cols @ kernel.reshape(c_out, -1).T
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.T.reshape(c_out, ho, wo))


def conv2d(x, spec: ConvSpec):
    """2D convolution (cross-correlation form, symmetric zero padding)."""
    if x.ndim != 3:
        raise ContractViolation(f"input must be (C,H,W), got shape {x.shape}")
    if x.shape[0] != spec.kernel.shape[1]:
        raise ContractViolation(
            f"input channels {x.shape[0]} != kernel c_in {spec.kernel.shape[1]}"
        )
    return _conv_raw(x, spec.kernel, spec.bias, spec.stride, spec.padding)


def conv2d_backward(x, spec: ConvSpec, grad_out):
    """VJP of conv2d: returns (d_input, d_kernel, d_bias)."""
    c_out = spec.kernel.shape[0]
    kh, kw = spec.kernel.shape[2:]
    cols, (ho, wo) = _im2col(x, kh, kw, spec.stride, spec.padding)
    g = grad_out.reshape(c_out, ho * wo)
    d_kernel = (g @ cols).reshape(spec.kernel.shape)
    d_cols = g.T @ spec.kernel.reshape(c_out, -1)
    d_x = _col2im(d_cols, x.shape, kh, kw, spec.stride, spec.padding)
    d_bias = None if spec.bias is None else grad_out.sum(axis=(1, 2))
    return d_x, d_kernel, d_bias


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(out, grad_out):
    # `out` is the relu output; mask is identical to the input-side mask.
    return np.where(out > 0.0, grad_out, 0.0)


def maxpool2(x):
    """Non-overlapping 2x2 max pooling; extents must be even."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractViolation(f"maxpool2 needs even extents, got {h}x{w}")
    return x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def maxpool2_backward(x, grad_out):
    """Route gradient to the (first) argmax of each 2x2 window."""
    c, h, w = x.shape
    win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    g = np.zeros_like(win)
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=-1)
    return g.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)


def avg_downsample(x, target):
    """Block-average (C,H,W) down to (C,h,w); H and W must be divisible."""
    c, h, w = x.shape
    th, tw = target
    if th < 1 or tw < 1 or h % th or w % tw:
        raise ContractViolation(f"cannot block-average {h}x{w} down to {th}x{tw}")
    return x.reshape(c, th, h // th, tw, w // tw).mean(axis=(2, 4))


def avg_downsample_backward(x_shape, target, grad_out):
    c, h, w = x_shape
    th, tw = target
    bh, bw = h // th, w // tw
    g = grad_out / (bh * bw)
    return np.broadcast_to(g[:, :, None, :, None], (c, th, bh, tw, bw)).reshape(c, h, w).copy()


def standardize_map(x):
    """Per-channel zero-mean unit-variance; near-constant channels are only centered."""
    if x.ndim != 3:
        raise ContractViolation(f"expected (C,H,W), got shape {x.shape}")
    if x.size < 2:
        raise ContractViolation("standardize_map needs at least 2 values")
    mu = x.mean(axis=(1, 2), keepdims=True)
    var = x.var(axis=(1, 2), keepdims=True)
    centered = x - mu
    scale = np.where(var < VAR_GUARD, 1.0, np.sqrt(var))
    return centered / scale


def standardize_map_backward(x, grad_out):
    """VJP of standardize_map (the usual normalization backward, per channel)."""
    n = x[0].size
    mu = x.mean(axis=(1, 2), keepdims=True)
    var = x.var(axis=(1, 2), keepdims=True)
    degenerate = var < VAR_GUARD
    sigma = np.where(degenerate, 1.0, np.sqrt(var))
    y = (x - mu) / sigma
    g_mean = grad_out.mean(axis=(1, 2), keepdims=True)
    gy_mean = (grad_out * y).mean(axis=(1, 2), keepdims=True)
    full = (grad_out - g_mean - y * gy_mean) / sigma
    centered_only = grad_out - g_mean
    return np.where(degenerate, centered_only, full)


def softmax_flat(x):
    """Numerically stable softmax over all cells of a 2D map."""
    m = x.max()
    e = np.exp(x - m)
    return e / e.sum()
