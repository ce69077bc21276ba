"""Topologically subdivisioned convolution.

The n channels are arranged as an s-dimensional grid [d_1, ..., d_s] with
prod(d_i) = n, and each output channel connects only to input channels inside
a wrap-around neighborhood of shape [c_1, ..., c_s] anchored at its own grid
position. The connection pattern is a fixed structured sparsity: each output
channel reads exactly c = prod(c_i) inputs, so the multiply count of a dense
convolution drops by the factor c/n while the kernel keeps full spatial extent.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from .conv import pad_spatial, spatial_windows
from .tensor import Tensor4

try:  # optional JIT for the sparse-gather loop nests; numpy paths below are
    from numba import njit, prange  # the reference semantics and the fallback

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


@dataclass(frozen=True)
class TopologyConfig:
    """Channel grid shape and neighborhood shape, one entry per grid axis."""

    dims: tuple[int, ...]
    neighborhood: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "neighborhood", tuple(int(c) for c in self.neighborhood))
        if len(self.dims) != len(self.neighborhood):
            raise ValueError("dims and neighborhood must have the same rank")
        if not self.dims:
            raise ValueError("topology needs at least one axis")
        for d, c in zip(self.dims, self.neighborhood):
            if d < 1 or c < 1:
                raise ValueError("grid and neighborhood extents must be >= 1")
            if c > d:
                raise ValueError(f"neighborhood extent {c} exceeds grid extent {d}")

    @property
    def channels(self) -> int:
        return prod(self.dims)

    @property
    def neighbor_count(self) -> int:
        return prod(self.neighborhood)


def channel_to_coords(j: int, dims) -> tuple[int, ...]:
    """Row-major bijection from a 1-based channel index to 1-based grid coords."""
    dims = tuple(dims)
    n = prod(dims)
    if not 1 <= j <= n:
        raise ValueError(f"channel index {j} out of range 1..{n}")
    coords = np.unravel_index(j - 1, dims)
    return tuple(int(c) + 1 for c in coords)


def coords_to_channel(coords, dims) -> int:
    dims = tuple(dims)
    coords = tuple(coords)
    if len(coords) != len(dims):
        raise ValueError("coordinate rank does not match grid rank")
    for c, d in zip(coords, dims):
        if not 1 <= c <= d:
            raise ValueError(f"coordinate {c} out of range 1..{d}")
    return int(np.ravel_multi_index(tuple(c - 1 for c in coords), dims)) + 1


def neighbor_table(topo: TopologyConfig) -> np.ndarray:
    """(n, c) table of 0-based input channel indices read by each output channel.

    Offsets along each axis wrap modulo the grid extent, so the pattern is
    invariant under simultaneous cyclic shifts of inputs and outputs. Column
    q enumerates offset vectors in row-major order over the neighborhood.
    """
    n = topo.channels
    grids = np.indices(topo.dims).reshape(len(topo.dims), n)  # 0-based coords per axis
    offsets = np.indices(topo.neighborhood).reshape(len(topo.dims), topo.neighbor_count)
    shifted = (grids[:, :, None] + offsets[:, None, :]) % np.array(topo.dims)[:, None, None]
    return np.ravel_multi_index(tuple(shifted), topo.dims)


def topo_mask(topo: TopologyConfig) -> np.ndarray:
    """Boolean (n_out, n_in) connectivity matrix; each row has exactly
    `neighbor_count` true entries."""
    n = topo.channels
    mask = np.zeros((n, n), dtype=bool)
    table = neighbor_table(topo)
    rows = np.repeat(np.arange(n), topo.neighbor_count)
    mask[rows, table.ravel()] = True
    return mask


@dataclass
class TopoKernel:
    """Weights (n_out, c, kh, kw): per output channel, one (kh, kw) filter for
    each of its c neighbors, in `neighbor_table` column order."""

    weights: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ValueError(f"TopoKernel weights must be rank 4, got {self.weights.shape}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def neighbor_count(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


def _check_topo(x: Tensor4, kernel: TopoKernel, topo: TopologyConfig) -> None:
    if topo.channels != x.shape.channels:
        raise ValueError(
            f"topology grid {topo.dims} implies {topo.channels} channels, "
            f"tensor has {x.shape.channels}"
        )
    if kernel.out_channels != topo.channels or kernel.neighbor_count != topo.neighbor_count:
        raise ValueError("kernel shape does not match topology configuration")


def inverse_neighbor_table(topo: TopologyConfig) -> np.ndarray:
    """(n, c) table inverting `neighbor_table` per offset column: entry (i, q)
    is the output channel that reads input channel i at offset q."""
    table = neighbor_table(topo)
    n, c = table.shape
    inv = np.empty_like(table)
    rows = np.arange(n)
    for q in range(c):
        inv[table[:, q], q] = rows
    return inv


if _HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _topo_fwd_kernel(xp, table, weights, out):  # pragma: no cover (compiled)
        bsz, n, h, w = out.shape
        c = table.shape[1]
        k = weights.shape[2]
        for b in prange(bsz):
            for j in range(n):
                for y in range(h):
                    for x in range(w):
                        acc = 0.0
                        for q in range(c):
                            i = table[j, q]
                            for u in range(k):
                                for v in range(k):
                                    acc += weights[j, q, u, v] * xp[b, i, y + u, x + v]
                        out[b, j, y, x] = acc

    @njit(cache=True, parallel=True)
    def _topo_gradw_kernel(xp, table, g, grad_w):  # pragma: no cover (compiled)
        bsz, n, h, w = g.shape
        c = table.shape[1]
        k = grad_w.shape[2]
        for j in prange(n):
            for q in range(c):
                i = table[j, q]
                for u in range(k):
                    for v in range(k):
                        acc = 0.0
                        for b in range(bsz):
                            for y in range(h):
                                for x in range(w):
                                    acc += g[b, j, y, x] * xp[b, i, y + u, x + v]
                        grad_w[j, q, u, v] = acc

    @njit(cache=True, parallel=True)
    def _topo_gradx_kernel(g, table, weights, grad_xp):  # pragma: no cover (compiled)
        bsz, n, h, w = g.shape
        c = table.shape[1]
        k = weights.shape[2]
        for b in prange(bsz):
            for j in range(n):
                for q in range(c):
                    i = table[j, q]
                    for y in range(h):
                        for x in range(w):
                            gval = g[b, j, y, x]
                            for u in range(k):
                                for v in range(k):
                                    grad_xp[b, i, y + u, x + v] += gval * weights[j, q, u, v]


def topo_conv(x: Tensor4, kernel: TopoKernel, topo: TopologyConfig) -> Tensor4:
    """Sparse convolution reading only each channel's wrap-around neighbors.

    Non-neighbor weights do not exist, so nothing is multiplied by zero; the
    cost is n*c*k^2 products per output pixel. The loop nest is JIT-compiled
    when numba is available (parallel over the batch axis; accumulation order
    within each output element is fixed, so results are bitwise independent
    of the thread count); otherwise a vectorized numpy path runs.
    """
    _check_topo(x, kernel, topo)
    kh, kw = kernel.kernel_size
    if kh != kw or kh % 2 == 0:
        raise ValueError("topological convolution expects a square odd kernel")
    xp = pad_spatial(x.data, (kh - 1) // 2)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError("kernel larger than padded input")
    table = neighbor_table(topo)
    b = x.data.shape[0]
    h, w = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    out = np.zeros((b, topo.channels, h, w), dtype=x.data.dtype)
    if _HAVE_NUMBA:
        _topo_fwd_kernel(np.ascontiguousarray(xp), table, kernel.weights, out)
        return Tensor4.wrap(out)
    gathered = xp[:, table]  # (B, n, c, Hp, Wp)
    for u in range(kh):
        for v in range(kw):
            out += np.einsum(
                "bjqhw,jq->bjhw",
                gathered[:, :, :, u : u + h, v : v + w],
                kernel.weights[:, :, u, v],
                optimize=True,
            )
    return Tensor4.wrap(out)


def topo_conv_backward(
    x: Tensor4, kernel: TopoKernel, topo: TopologyConfig, grad_out: Tensor4
) -> tuple[Tensor4, np.ndarray]:
    _check_topo(x, kernel, topo)
    kh, kw = kernel.kernel_size
    pad = (kh - 1) // 2
    xp = pad_spatial(x.data, pad)
    g = grad_out.data
    ho, wo = g.shape[2], g.shape[3]
    table = neighbor_table(topo)

    if _HAVE_NUMBA:
        xp_c = np.ascontiguousarray(xp)
        g_c = np.ascontiguousarray(g)
        grad_w = np.zeros_like(kernel.weights)
        _topo_gradw_kernel(xp_c, table, g_c, grad_w)
        grad_xp = np.zeros_like(xp_c)
        _topo_gradx_kernel(g_c, table, kernel.weights, grad_xp)
        if pad:
            grad_xp = grad_xp[:, :, pad:-pad, pad:-pad]
        return Tensor4.wrap(np.ascontiguousarray(grad_xp)), grad_w

    gathered = xp[:, table]
    grad_w = np.empty_like(kernel.weights)
    for u in range(kh):
        for v in range(kw):
            grad_w[:, :, u, v] = np.einsum(
                "bjqhw,bjhw->jq", gathered[:, :, :, u : u + ho, v : v + wo], g, optimize=True
            )

    # Input gradient via the inverse tables: channel i receives, per offset q,
    # the gradient of the one output channel that reads it at that offset.
    inv = inverse_neighbor_table(topo)
    k_inv = kernel.weights[inv, np.arange(topo.neighbor_count)[None, :]]  # (n, c, kh, kw)
    g_inv = g[:, inv]  # (B, n, c, Ho, Wo)
    grad_xp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            grad_xp[:, :, u : u + ho, v : v + wo] += np.einsum(
                "biqhw,iq->bihw", g_inv, k_inv[:, :, u, v], optimize=True
            )
    if pad:
        grad_xp = grad_xp[:, :, pad:-pad, pad:-pad]
    return Tensor4.wrap(np.ascontiguousarray(grad_xp)), grad_w
