"""Standard and grouped dense 2D convolution with hand-written gradients.

The forward map for a dense kernel is

    out[b, o, y, x] = sum_{i, u, v} w[o, i, u, v] * padded[b, i, y*s + u, x*s + v]

with `s` the stride and `padded` the zero-padded input. Backward passes are
exact gradients of this map; there is no autodiff graph anywhere in the
library, every layer carries its own reverse-mode code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor4


@dataclass
class ConvKernel:
    """Dense convolution weights of shape (out_channels, in_channels, kh, kw)."""

    weights: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ValueError(f"ConvKernel weights must be rank 4, got {self.weights.shape}")
        if min(self.weights.shape) < 1:
            raise ValueError("all kernel dimensions must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


def spatial_windows(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of all kernel-sized patches: (B, C, Ho, Wo, kh, kw), no copy."""
    if padded.shape[2] < kh or padded.shape[3] < kw:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {padded.shape[2]}x{padded.shape[3]}"
        )
    win = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, tuple]:
    """Patch matrix (B*Ho*Wo, Cin*kh*kw) and the (B, Ho, Wo) geometry."""
    win = spatial_windows(xp, kh, kw, stride)
    b, ci, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, ci * kh * kw)
    return cols, (b, ho, wo)


def conv_standard(x: Tensor4, kernel: ConvKernel, pad: int = 0, stride: int = 1) -> Tensor4:
    if kernel.in_channels != x.shape.channels:
        raise ValueError(
            f"kernel expects {kernel.in_channels} input channels, tensor has {x.shape.channels}"
        )
    if stride < 1:
        raise ValueError("stride must be >= 1")
    xp = pad_spatial(x.data, pad)
    kh, kw = kernel.kernel_size
    cols, (b, ho, wo) = _im2col(xp, kh, kw, stride)
    out = cols @ kernel.weights.reshape(kernel.out_channels, -1).T
    out = out.reshape(b, ho, wo, kernel.out_channels).transpose(0, 3, 1, 2)
    return Tensor4.wrap(np.ascontiguousarray(out))


def conv_standard_backward(
    x: Tensor4, kernel: ConvKernel, grad_out: Tensor4, pad: int = 0, stride: int = 1
) -> tuple[Tensor4, np.ndarray]:
    """Gradients of conv_standard w.r.t. its input and its kernel weights."""
    xp = pad_spatial(x.data, pad)
    kh, kw = kernel.kernel_size
    ci = kernel.in_channels
    co = kernel.out_channels
    g = grad_out.data
    b, _, ho, wo = g.shape
    cols, _ = _im2col(xp, kh, kw, stride)
    g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, co)
    grad_w = (g_mat.T @ cols).reshape(co, ci, kh, kw)

    # Columns gradient back to image coordinates (col2im scatter).
    grad_cols = (g_mat @ kernel.weights.reshape(co, -1)).reshape(b, ho, wo, ci, kh, kw)
    grad_xp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            grad_xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += (
                grad_cols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            )
    if pad:
        grad_xp = grad_xp[:, :, pad:-pad, pad:-pad]
    return Tensor4.wrap(np.ascontiguousarray(grad_xp)), grad_w


def _group_bounds(channels_out: int, channels_in: int, groups: int):
    if channels_in % groups or channels_out % groups:
        raise ValueError(
            f"groups={groups} must divide input ({channels_in}) and output "
            f"({channels_out}) channel counts"
        )
    return channels_in // groups, channels_out // groups


def grouped_conv(
    x: Tensor4, kernel: ConvKernel, groups: int, pad: int = 0, stride: int = 1
) -> Tensor4:
    """Block-diagonal channel connectivity: group g of the outputs sees only
    group g of the inputs. The kernel keeps the full dense layout; weights
    outside the diagonal blocks are never read.
    """
    if kernel.in_channels != x.shape.channels:
        raise ValueError("kernel/input channel mismatch")
    cin_g, cout_g = _group_bounds(kernel.out_channels, kernel.in_channels, groups)
    parts = []
    for g in range(groups):
        sub = ConvKernel(kernel.weights[g * cout_g : (g + 1) * cout_g, g * cin_g : (g + 1) * cin_g])
        xg = Tensor4.wrap(np.ascontiguousarray(x.data[:, g * cin_g : (g + 1) * cin_g]))
        parts.append(conv_standard(xg, sub, pad=pad, stride=stride).data)
    return Tensor4.wrap(np.concatenate(parts, axis=1))


def grouped_conv_backward(
    x: Tensor4, kernel: ConvKernel, groups: int, grad_out: Tensor4, pad: int = 0, stride: int = 1
) -> tuple[Tensor4, np.ndarray]:
    cin_g, cout_g = _group_bounds(kernel.out_channels, kernel.in_channels, groups)
    grad_x = np.empty_like(x.data)
    grad_w = np.zeros_like(kernel.weights)
    for g in range(groups):
        rows = slice(g * cout_g, (g + 1) * cout_g)
        cols = slice(g * cin_g, (g + 1) * cin_g)
        sub = ConvKernel(kernel.weights[rows, cols])
        xg = Tensor4.wrap(np.ascontiguousarray(x.data[:, cols]))
        gg = Tensor4.wrap(np.ascontiguousarray(grad_out.data[:, rows]))
        gx, gw = conv_standard_backward(xg, sub, gg, pad=pad, stride=stride)
        grad_x[:, cols] = gx.data
        grad_w[rows, cols] = gw
    return Tensor4.wrap(grad_x), grad_w
