"""Per-channel spatial convolution, its transpose, and linear channel projection.

An intra-channel convolution applies one 2D filter to each channel
independently (no cross-channel mixing); the linear projection is a per-pixel
matrix multiply across channels, i.e. a 1x1 convolution. Together these are
the two halves into which a dense convolution unravels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import pad_spatial
from .tensor import Tensor4


@dataclass
class IntraChannelKernel:
    """One (kh, kw) filter per channel: weights shape (channels, kh, kw)."""

    weights: np.ndarray
    stride: int = 1

    def __post_init__(self):
        if self.weights.ndim != 3:
            raise ValueError(f"IntraChannelKernel weights must be rank 3, got {self.weights.shape}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def channels(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[1], self.weights.shape[2]


@dataclass
class ProjectionMatrix:
    """Per-pixel channel mixing: weights shape (in_channels, out_channels)."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ValueError(f"ProjectionMatrix weights must be rank 2, got {self.weights.shape}")
        if self.bias is not None and self.bias.shape != (self.weights.shape[1],):
            raise ValueError("bias length must equal the output channel count")

    @property
    def in_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[1]


def _depthwise_geometry(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[int, int]:
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def intra_channel_conv(x: Tensor4, kernel: IntraChannelKernel, pad: int = 0) -> Tensor4:
    """out[b,c,y,x] = sum_{u,v} w[c,u,v] * padded[b,c,y*s+u, x*s+v]."""
    if kernel.channels != x.shape.channels:
        raise ValueError(
            f"kernel has {kernel.channels} channels, tensor has {x.shape.channels}"
        )
    xp = pad_spatial(x.data, pad)
    kh, kw = kernel.kernel_size
    s = kernel.stride
    ho, wo = _depthwise_geometry(xp, kh, kw, s)
    out = np.zeros((xp.shape[0], xp.shape[1], ho, wo), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            out += xp[:, :, u : u + s * ho : s, v : v + s * wo : s] * (
                kernel.weights[None, :, u, v, None, None]
            )
    return Tensor4.wrap(out)


def intra_channel_conv_backward(
    x: Tensor4, kernel: IntraChannelKernel, grad_out: Tensor4, pad: int = 0
) -> tuple[Tensor4, np.ndarray]:
    xp = pad_spatial(x.data, pad)
    kh, kw = kernel.kernel_size
    s = kernel.stride
    g = grad_out.data
    ho, wo = g.shape[2], g.shape[3]

    grad_w = np.empty_like(kernel.weights)
    grad_xp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, :, u : u + s * ho : s, v : v + s * wo : s]
            grad_w[:, u, v] = np.einsum("bchw,bchw->c", sl, g, optimize=True)
            grad_xp[:, :, u : u + s * ho : s, v : v + s * wo : s] += (
                g * kernel.weights[None, :, u, v, None, None]
            )
    if pad:
        grad_xp = grad_xp[:, :, pad:-pad, pad:-pad]
    return Tensor4.wrap(np.ascontiguousarray(grad_xp)), grad_w


def intra_channel_deconv(x: Tensor4, kernel: IntraChannelKernel) -> Tensor4:
    """Transposed per-channel convolution.

    Each input pixel (y, x) scatters value * w[c, u, v] to output position
    (y*s + u, x*s + v). With stride equal to the kernel size the k x k blocks
    tile the output without overlap and the spatial dims grow by a factor k.
    This is the exact adjoint of `intra_channel_conv` with the same kernel.
    """
    if kernel.channels != x.shape.channels:
        raise ValueError("kernel/input channel mismatch")
    b, c, h, w = x.data.shape
    kh, kw = kernel.kernel_size
    s = kernel.stride
    out = np.zeros((b, c, (h - 1) * s + kh, (w - 1) * s + kw), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u : u + s * h : s, v : v + s * w : s] += (
                x.data * kernel.weights[None, :, u, v, None, None]
            )
    return Tensor4.wrap(out)


def intra_channel_deconv_backward(
    x: Tensor4, kernel: IntraChannelKernel, grad_out: Tensor4
) -> tuple[Tensor4, np.ndarray]:
    # By adjointness the input gradient is the forward strided convolution of
    # the upstream gradient with the same kernel.
    kh, kw = kernel.kernel_size
    s = kernel.stride
    g = grad_out.data
    h, w = x.data.shape[2], x.data.shape[3]
    grad_x = np.zeros_like(x.data)
    grad_w = np.empty_like(kernel.weights)
    for u in range(kh):
        for v in range(kw):
            sl = g[:, :, u : u + s * h : s, v : v + s * w : s]
            grad_x += sl * kernel.weights[None, :, u, v, None, None]
            grad_w[:, u, v] = np.einsum("bchw,bchw->c", sl, x.data, optimize=True)
    return Tensor4.wrap(grad_x), grad_w


def linear_projection(x: Tensor4, p: ProjectionMatrix) -> Tensor4:
    """Per-pixel channel mix: out[b,o,y,x] = sum_i x[b,i,y,x] * w[i,o] (+bias)."""
    if p.in_channels != x.shape.channels:
        raise ValueError(
            f"projection expects {p.in_channels} channels, tensor has {x.shape.channels}"
        )
    out = np.einsum("bihw,io->bohw", x.data, p.weights, optimize=True)
    if p.bias is not None:
        out += p.bias[None, :, None, None]
    return Tensor4.wrap(np.ascontiguousarray(out))


def linear_projection_backward(
    x: Tensor4, p: ProjectionMatrix, grad_out: Tensor4
) -> tuple[Tensor4, np.ndarray, np.ndarray | None]:
    g = grad_out.data
    grad_x = np.einsum("bohw,io->bihw", g, p.weights, optimize=True)
    grad_w = np.einsum("bihw,bohw->io", x.data, g, optimize=True)
    grad_b = g.sum(axis=(0, 2, 3)) if p.bias is not None else None
    return Tensor4.wrap(np.ascontiguousarray(grad_x)), grad_w, grad_b
