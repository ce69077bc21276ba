"""Composite efficient-convolution blocks.

Three designs, all built from per-channel spatial convolution and linear
channel projection:

* SIC layer: per iteration, convolve each channel with a single 2D filter,
  mix channels with a projection, normalize, add the iteration input back and
  apply ReLU. Iterations chain sequentially with the channel count fixed.
* Unraveled convolution: convolve each channel with several 2D filters at
  once, project the widened stack back to the original width, then the same
  residual + ReLU wrapper.
* Spatial bottleneck: strided per-channel convolution shrinks the spatial
  grid by the stride factor, the (expensive) projection runs on the small
  grid, and a strided per-channel deconvolution restores the resolution.
* Channel-wise bottleneck: two stacked SIC-style layers that halve then
  restore the channel count, with one residual around the pair.

Backward functions are stateless: they recompute the forward intermediates
from the original input, then run exact reverse-mode through the chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basic import BatchNormState, batchnorm_backward, batchnorm_forward, relu_backward
from .intra import (
    IntraChannelKernel,
    ProjectionMatrix,
    intra_channel_conv,
    intra_channel_conv_backward,
    intra_channel_deconv,
    intra_channel_deconv_backward,
    linear_projection,
    linear_projection_backward,
)
from .tensor import Tensor4, add, crop, relu, zero_pad


def _require_square_odd(kernel_size: tuple[int, int]) -> int:
    kh, kw = kernel_size
    if kh != kw:
        raise ValueError(f"kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ValueError(f"kernel size must be odd for same-size padding, got {kh}")
    return kh


# -- SIC layer -------------------------------------------------------------


@dataclass
class SicIteration:
    """Parameters of one SIC iteration."""

    conv: IntraChannelKernel
    project: ProjectionMatrix
    norm: BatchNormState | None = None


@dataclass
class SicIterationGrads:
    conv: np.ndarray
    project: np.ndarray
    norm_scale: np.ndarray | None = None
    norm_shift: np.ndarray | None = None


def _sic_forward(x, iterations, train_mode, update_running):
    caches = []
    current = x
    for it in iterations:
        k = _require_square_odd(it.conv.kernel_size)
        if it.conv.channels != current.shape.channels:
            raise ValueError("SIC iteration channel mismatch")
        if it.project.in_channels != it.project.out_channels:
            raise ValueError("SIC projection must preserve the channel count")
        spatial = intra_channel_conv(current, it.conv, pad=(k - 1) // 2)
        projected = linear_projection(spatial, it.project)
        if it.norm is not None:
            normed = batchnorm_forward(projected, it.norm, train_mode, update_running)
        else:
            normed = projected
        pre = add(current, normed)
        caches.append((current, spatial, projected, pre))
        current = relu(pre)
    return current, caches


def _sic_backward_from_cache(iterations, caches, grad_out, train_mode):
    grads = [None] * len(iterations)
    grad = grad_out
    for i in range(len(iterations) - 1, -1, -1):
        it = iterations[i]
        inp, spatial, projected, pre = caches[i]
        k = it.conv.kernel_size[0]
        grad_pre = relu_backward(pre, grad)
        if it.norm is not None:
            grad_proj, g_scale, g_shift = batchnorm_backward(projected, it.norm, grad_pre, train_mode)
        else:
            grad_proj, g_scale, g_shift = grad_pre, None, None
        grad_spatial, grad_p, _ = linear_projection_backward(spatial, it.project, grad_proj)
        grad_conv_in, grad_k = intra_channel_conv_backward(inp, it.conv, grad_spatial, pad=(k - 1) // 2)
        grads[i] = SicIterationGrads(grad_k, grad_p, g_scale, g_shift)
        grad = add(grad_pre, grad_conv_in)  # residual path plus conv path
    return grad, grads


def sic_layer_forward(x: Tensor4, iterations, train_mode: bool = False) -> Tensor4:
    """Run the given SIC iterations in sequence and return the final output."""
    out, _ = _sic_forward(x, list(iterations), train_mode, update_running=train_mode)
    return out


def sic_layer_backward(
    x: Tensor4, iterations, grad_out: Tensor4, train_mode: bool = False
) -> tuple[Tensor4, list[SicIterationGrads]]:
    iterations = list(iterations)
    _, caches = _sic_forward(x, iterations, train_mode, update_running=False)
    return _sic_backward_from_cache(iterations, caches, grad_out, train_mode)


# -- unraveled convolution -------------------------------------------------------------


@dataclass
class UnraveledKernel:
    """Several 2D filters per channel: weights (channels, filters_per_channel, kh, kw).

    The widened intermediate keeps channel-major order: source channel j's
    filters occupy slots j*b .. j*b+b-1.
    """

    weights: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ValueError(f"UnraveledKernel weights must be rank 4, got {self.weights.shape}")

    @property
    def channels(self) -> int:
        return self.weights.shape[0]

    @property
    def filters_per_channel(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


def multi_filter_conv(x: Tensor4, kernel: UnraveledKernel, pad: int = 0) -> Tensor4:
    """Convolve every channel with its own stack of filters; output has
    channels * filters_per_channel channels (channel-major order)."""
    if kernel.channels != x.shape.channels:
        raise ValueError("kernel/input channel mismatch")
    kh, kw = kernel.kernel_size
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    bsz, n, hp, wp = xp.shape
    h, w = hp - kh + 1, wp - kw + 1
    out = np.zeros((bsz, n, kernel.filters_per_channel, h, w), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            out += xp[:, :, None, u : u + h, v : v + w] * (
                kernel.weights[None, :, :, u, v, None, None]
            )
    return Tensor4.wrap(out.reshape(bsz, -1, h, w))


def multi_filter_conv_backward(
    x: Tensor4, kernel: UnraveledKernel, grad_out: Tensor4, pad: int = 0
) -> tuple[Tensor4, np.ndarray]:
    kh, kw = kernel.kernel_size
    n, b_f = kernel.channels, kernel.filters_per_channel
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    bsz, _, ho, wo = grad_out.data.shape
    g5 = grad_out.data.reshape(bsz, n, b_f, ho, wo)
    grad_w = np.empty_like(kernel.weights)
    grad_xp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, :, u : u + ho, v : v + wo]
            grad_w[:, :, u, v] = np.einsum("bjhw,bjthw->jt", sl, g5, optimize=True)
            grad_xp[:, :, u : u + ho, v : v + wo] += np.einsum(
                "bjthw,jt->bjhw", g5, kernel.weights[:, :, u, v], optimize=True
            )
    if pad:
        grad_xp = grad_xp[:, :, pad:-pad, pad:-pad]
    return Tensor4.wrap(np.ascontiguousarray(grad_xp)), grad_w


@dataclass
class UnraveledGrads:
    filters: np.ndarray
    project: np.ndarray
    norm_scale: np.ndarray | None = None
    norm_shift: np.ndarray | None = None


def _unraveled_forward(x, kernel, project, norm, train_mode, update_running):
    k = _require_square_odd(kernel.kernel_size)
    if project.in_channels != kernel.channels * kernel.filters_per_channel:
        raise ValueError(
            f"projection expects {project.in_channels} rows, kernel produces "
            f"{kernel.channels * kernel.filters_per_channel} intermediate channels"
        )
    if project.out_channels != x.shape.channels:
        raise ValueError("unraveled projection must restore the input channel count")
    widened = multi_filter_conv(x, kernel, pad=(k - 1) // 2)
    projected = linear_projection(widened, project)
    normed = batchnorm_forward(projected, norm, train_mode, update_running) if norm else projected
    pre = add(x, normed)
    return relu(pre), (widened, projected, pre)


def unraveled_conv(
    x: Tensor4,
    kernel: UnraveledKernel,
    project: ProjectionMatrix,
    norm: BatchNormState | None = None,
    train_mode: bool = False,
) -> Tensor4:
    out, _ = _unraveled_forward(x, kernel, project, norm, train_mode, update_running=train_mode)
    return out


def unraveled_conv_backward(
    x: Tensor4,
    kernel: UnraveledKernel,
    project: ProjectionMatrix,
    grad_out: Tensor4,
    norm: BatchNormState | None = None,
    train_mode: bool = False,
) -> tuple[Tensor4, UnraveledGrads]:
    _, cache = _unraveled_forward(x, kernel, project, norm, train_mode, update_running=False)
    return _unraveled_backward_from_cache(x, kernel, project, cache, grad_out, norm, train_mode)


def _unraveled_backward_from_cache(x, kernel, project, cache, grad_out, norm, train_mode):
    k = kernel.kernel_size[0]
    widened, projected, pre = cache
    grad_pre = relu_backward(pre, grad_out)
    if norm is not None:
        grad_proj, g_scale, g_shift = batchnorm_backward(projected, norm, grad_pre, train_mode)
    else:
        grad_proj, g_scale, g_shift = grad_pre, None, None
    grad_widened, grad_p, _ = linear_projection_backward(widened, project, grad_proj)
    grad_conv_in, grad_w = multi_filter_conv_backward(x, kernel, grad_widened, pad=(k - 1) // 2)
    return add(grad_pre, grad_conv_in), UnraveledGrads(grad_w, grad_p, g_scale, g_shift)


# -- spatial bottleneck -------------------------------------------------------------


@dataclass
class SpatialBottleneckGrads:
    conv: np.ndarray
    project: np.ndarray
    deconv: np.ndarray
    norm_scale: np.ndarray | None = None
    norm_shift: np.ndarray | None = None


def _bottleneck_geometry(h: int, w: int, k: int, stride: int, pad: int):
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < k or wp < k:
        raise ValueError(f"padded input {hp}x{wp} smaller than kernel {k}x{k}")
    # Extra bottom/right zero padding when the stride does not tile evenly.
    extra_h = (stride - (hp - k) % stride) % stride
    extra_w = (stride - (wp - k) % stride) % stride
    return extra_h, extra_w


def _spatial_bottleneck_forward(x, conv_kernel, project, deconv_kernel, pad, norm, train_mode, update_running):
    k = conv_kernel.kernel_size[0]
    if conv_kernel.kernel_size[0] != conv_kernel.kernel_size[1]:
        raise ValueError("bottleneck convolution kernel must be square")
    if deconv_kernel.kernel_size != conv_kernel.kernel_size or deconv_kernel.stride != conv_kernel.stride:
        raise ValueError("deconvolution must mirror the convolution kernel size and stride")
    if project.in_channels != project.out_channels:
        raise ValueError("bottleneck projection must preserve the channel count")
    _, _, h, w = x.data.shape
    extra_h, extra_w = _bottleneck_geometry(h, w, k, conv_kernel.stride, pad)
    padded = zero_pad(x, pad, pad + extra_h, pad, pad + extra_w)
    reduced = intra_channel_conv(padded, conv_kernel, pad=0)
    projected = linear_projection(reduced, project)
    restored = intra_channel_deconv(projected, deconv_kernel)
    if restored.data.shape != padded.data.shape:
        raise ValueError("deconvolution failed to restore the padded resolution")
    cropped = (
        crop(restored, pad, pad + extra_h, pad, pad + extra_w)
        if pad or extra_h or extra_w
        else restored
    )
    normed = batchnorm_forward(cropped, norm, train_mode, update_running) if norm else cropped
    pre = add(x, normed)
    cache = (padded, reduced, projected, cropped, pre, extra_h, extra_w)
    return relu(pre), cache


def spatial_bottleneck_forward(
    x: Tensor4,
    conv_kernel: IntraChannelKernel,
    project: ProjectionMatrix,
    deconv_kernel: IntraChannelKernel,
    pad: int = 0,
    norm: BatchNormState | None = None,
    train_mode: bool = False,
) -> Tensor4:
    """Strided per-channel conv, projection on the reduced grid, strided
    per-channel deconv, then normalization, residual add and ReLU at the
    original resolution."""
    out, _ = _spatial_bottleneck_forward(
        x, conv_kernel, project, deconv_kernel, pad, norm, train_mode, update_running=train_mode
    )
    return out


def spatial_bottleneck_backward(
    x: Tensor4,
    conv_kernel: IntraChannelKernel,
    project: ProjectionMatrix,
    deconv_kernel: IntraChannelKernel,
    grad_out: Tensor4,
    pad: int = 0,
    norm: BatchNormState | None = None,
    train_mode: bool = False,
) -> tuple[Tensor4, SpatialBottleneckGrads]:
    _, cache = _spatial_bottleneck_forward(
        x, conv_kernel, project, deconv_kernel, pad, norm, train_mode, update_running=False
    )
    return _spatial_bottleneck_backward_from_cache(
        conv_kernel, project, deconv_kernel, cache, grad_out, pad, norm, train_mode
    )


def _spatial_bottleneck_backward_from_cache(
    conv_kernel, project, deconv_kernel, cache, grad_out, pad, norm, train_mode
):
    padded, reduced, projected, cropped, pre, extra_h, extra_w = cache
    grad_pre = relu_backward(pre, grad_out)
    if norm is not None:
        grad_cropped, g_scale, g_shift = batchnorm_backward(cropped, norm, grad_pre, train_mode)
    else:
        grad_cropped, g_scale, g_shift = grad_pre, None, None
    grad_restored = zero_pad(grad_cropped, pad, pad + extra_h, pad, pad + extra_w)
    grad_projected, grad_deconv_w = intra_channel_deconv_backward(
        projected, deconv_kernel, grad_restored
    )
    grad_reduced, grad_p, _ = linear_projection_backward(reduced, project, grad_projected)
    grad_padded, grad_conv_w = intra_channel_conv_backward(padded, conv_kernel, grad_reduced, pad=0)
    grad_x = crop(grad_padded, pad, pad + extra_h, pad, pad + extra_w) if (pad or extra_h or extra_w) else grad_padded
    grad_input = add(grad_pre, grad_x)
    return grad_input, SpatialBottleneckGrads(grad_conv_w, grad_p, grad_deconv_w, g_scale, g_shift)


# -- channel-wise bottleneck -------------------------------------------------------------


@dataclass
class ChannelBottleneckParams:
    """Halve-then-restore channel pair built from SIC-style halves."""

    reduce_conv: IntraChannelKernel
    reduce_project: ProjectionMatrix
    expand_conv: IntraChannelKernel
    expand_project: ProjectionMatrix
    reduce_norm: BatchNormState | None = None
    expand_norm: BatchNormState | None = None


@dataclass
class ChannelBottleneckGrads:
    reduce_conv: np.ndarray
    reduce_project: np.ndarray
    expand_conv: np.ndarray
    expand_project: np.ndarray
    reduce_norm_scale: np.ndarray | None = None
    reduce_norm_shift: np.ndarray | None = None
    expand_norm_scale: np.ndarray | None = None
    expand_norm_shift: np.ndarray | None = None


def _channel_bottleneck_forward(x, params, train_mode, update_running):
    n = x.shape.channels
    if n % 2:
        raise ValueError("channel-wise bottleneck needs an even channel count")
    half = n // 2
    if params.reduce_project.weights.shape != (n, half):
        raise ValueError(f"reduce projection must map {n} -> {half} channels")
    if params.expand_project.weights.shape != (half, n):
        raise ValueError(f"expand projection must map {half} -> {n} channels")
    k1 = _require_square_odd(params.reduce_conv.kernel_size)
    k2 = _require_square_odd(params.expand_conv.kernel_size)

    r_spatial = intra_channel_conv(x, params.reduce_conv, pad=(k1 - 1) // 2)
    r_proj = linear_projection(r_spatial, params.reduce_project)
    r_normed = (
        batchnorm_forward(r_proj, params.reduce_norm, train_mode, update_running)
        if params.reduce_norm
        else r_proj
    )
    narrow = relu(r_normed)  # no residual here: the channel count changed

    e_spatial = intra_channel_conv(narrow, params.expand_conv, pad=(k2 - 1) // 2)
    e_proj = linear_projection(e_spatial, params.expand_project)
    e_normed = (
        batchnorm_forward(e_proj, params.expand_norm, train_mode, update_running)
        if params.expand_norm
        else e_proj
    )
    pre = add(x, e_normed)
    cache = (r_spatial, r_proj, r_normed, narrow, e_spatial, e_proj, pre)
    return relu(pre), cache


def channelwise_bottleneck_block(
    x: Tensor4, params: ChannelBottleneckParams, train_mode: bool = False
) -> Tensor4:
    out, _ = _channel_bottleneck_forward(x, params, train_mode, update_running=train_mode)
    return out


def channelwise_bottleneck_backward(
    x: Tensor4, params: ChannelBottleneckParams, grad_out: Tensor4, train_mode: bool = False
) -> tuple[Tensor4, ChannelBottleneckGrads]:
    _, cache = _channel_bottleneck_forward(x, params, train_mode, update_running=False)
    return _channel_bottleneck_backward_from_cache(x, params, cache, grad_out, train_mode)


def _channel_bottleneck_backward_from_cache(x, params, cache, grad_out, train_mode):
    r_spatial, r_proj, r_normed, narrow, e_spatial, e_proj, pre = cache
    k1 = params.reduce_conv.kernel_size[0]
    k2 = params.expand_conv.kernel_size[0]

    grad_pre = relu_backward(pre, grad_out)
    if params.expand_norm is not None:
        grad_eproj, ge_scale, ge_shift = batchnorm_backward(
            e_proj, params.expand_norm, grad_pre, train_mode
        )
    else:
        grad_eproj, ge_scale, ge_shift = grad_pre, None, None
    grad_espatial, grad_ep, _ = linear_projection_backward(e_spatial, params.expand_project, grad_eproj)
    grad_narrow, grad_ek = intra_channel_conv_backward(
        narrow, params.expand_conv, grad_espatial, pad=(k2 - 1) // 2
    )

    grad_rnormed = relu_backward(r_normed, grad_narrow)
    if params.reduce_norm is not None:
        grad_rproj, gr_scale, gr_shift = batchnorm_backward(
            r_proj, params.reduce_norm, grad_rnormed, train_mode
        )
    else:
        grad_rproj, gr_scale, gr_shift = grad_rnormed, None, None
    grad_rspatial, grad_rp, _ = linear_projection_backward(r_spatial, params.reduce_project, grad_rproj)
    grad_rconv_in, grad_rk = intra_channel_conv_backward(
        x, params.reduce_conv, grad_rspatial, pad=(k1 - 1) // 2
    )
    grad_input = add(grad_pre, grad_rconv_in)
    return grad_input, ChannelBottleneckGrads(
        grad_rk, grad_rp, grad_ek, grad_ep, gr_scale, gr_shift, ge_scale, ge_shift
    )
