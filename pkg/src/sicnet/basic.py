"""Network plumbing: ReLU gradient, pooling, batch norm, FC head, softmax loss.

These are the standard pieces needed to assemble full image classifiers around
the efficient convolution blocks. Forward definitions are the textbook ones;
every op has an exact hand-written backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conv import spatial_windows
from .tensor import Tensor4


def relu_backward(x: Tensor4, grad_out: Tensor4) -> Tensor4:
    """Pass upstream gradient where x > 0, zero elsewhere (subgradient 0 at 0)."""
    return Tensor4.wrap(grad_out.data * (x.data > 0))


# -- pooling -------------------------------------------------------------------


def max_pool(x: Tensor4, window: int, stride: int) -> Tensor4:
    win = spatial_windows(x.data, window, window, stride)
    return Tensor4.wrap(np.ascontiguousarray(win.max(axis=(4, 5))))


def max_pool_backward(x: Tensor4, window: int, stride: int, grad_out: Tensor4) -> Tensor4:
    # Route each output gradient to the first maximal element of its window
    # (np.argmax tie-breaking), matching the forward selection deterministically.
    win = spatial_windows(x.data, window, window, stride)
    b, c, ho, wo = win.shape[:4]
    idx = win.reshape(b, c, ho, wo, window * window).argmax(axis=-1)
    rows = (np.arange(ho) * stride)[None, None, :, None] + idx // window
    cols = (np.arange(wo) * stride)[None, None, None, :] + idx % window
    grad_x = np.zeros_like(x.data)
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(grad_x, (bi, ci, rows, cols), grad_out.data)
    return Tensor4.wrap(grad_x)


def avg_pool(x: Tensor4, window: int, stride: int) -> Tensor4:
    win = spatial_windows(x.data, window, window, stride)
    return Tensor4.wrap(np.ascontiguousarray(win.mean(axis=(4, 5))))


def avg_pool_backward(x: Tensor4, window: int, stride: int, grad_out: Tensor4) -> Tensor4:
    b, c, h, w = x.data.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    grad_x = np.zeros_like(x.data)
    g = grad_out.data / (window * window)
    for u in range(window):
        for v in range(window):
            grad_x[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += g
    return Tensor4.wrap(grad_x)


# -- batch normalization ---------------------------------------------------------


@dataclass
class BatchNormState:
    """Per-channel affine normalization with running statistics.

    Training mode normalizes by the batch moments and folds them into the
    running estimates with an exponential moving average; evaluation mode
    normalizes by the running estimates.
    """

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    running_var: np.ndarray = field(default=None)  # type: ignore[assignment]
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        c = self.scale.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(c, dtype=self.scale.dtype)
        if self.running_var is None:
            self.running_var = np.ones(c, dtype=self.scale.dtype)
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.ones(channels, dtype=dtype), np.zeros(channels, dtype=dtype))


def batchnorm_forward(
    x: Tensor4, state: BatchNormState, train_mode: bool, update_running: bool = True
) -> Tensor4:
    if state.channels != x.shape.channels:
        raise ValueError("batchnorm channel mismatch")
    if train_mode:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_running:
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mean
            state.running_var = (1 - m) * state.running_var + m * var
    else:
        mean, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = state.scale[None, :, None, None] * xhat + state.shift[None, :, None, None]
    return Tensor4.wrap(out.astype(x.data.dtype, copy=False))


def batchnorm_backward(
    x: Tensor4, state: BatchNormState, grad_out: Tensor4, train_mode: bool
) -> tuple[Tensor4, np.ndarray, np.ndarray]:
    """Gradients w.r.t. (input, scale, shift); train mode differentiates
    through the batch statistics."""
    g = grad_out.data
    if not train_mode:
        inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
        grad_x = g * (state.scale * inv)[None, :, None, None]
        return Tensor4.wrap(grad_x), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    b, c, h, w = x.data.shape
    n = b * h * w
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + state.epsilon)
    centered = x.data - mean[None, :, None, None]
    xhat = centered * inv[None, :, None, None]

    grad_shift = g.sum(axis=(0, 2, 3))
    grad_scale = (g * xhat).sum(axis=(0, 2, 3))
    gxhat = g * state.scale[None, :, None, None]
    sum_gxhat = gxhat.sum(axis=(0, 2, 3))
    sum_gxhat_xhat = (gxhat * xhat).sum(axis=(0, 2, 3))
    grad_x = (inv[None, :, None, None] / n) * (
        n * gxhat
        - sum_gxhat[None, :, None, None]
        - xhat * sum_gxhat_xhat[None, :, None, None]
    )
    return Tensor4.wrap(grad_x.astype(x.data.dtype, copy=False)), grad_scale, grad_shift


# -- fully connected head ---------------------------------------------------------


def fully_connected(x: Tensor4, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Flatten to (batch, channels*height*width) and apply an affine map."""
    b = x.shape.batch
    flat = x.data.reshape(b, -1)
    if flat.shape[1] != weights.shape[0]:
        raise ValueError(
            f"fully connected expects {weights.shape[0]} features, got {flat.shape[1]}"
        )
    out = flat @ weights
    if bias is not None:
        out = out + bias
    return out


def fully_connected_backward(
    x: Tensor4, weights: np.ndarray, grad_out: np.ndarray, bias: np.ndarray | None = None
) -> tuple[Tensor4, np.ndarray, np.ndarray | None]:
    b = x.shape.batch
    flat = x.data.reshape(b, -1)
    grad_w = flat.T @ grad_out
    grad_b = grad_out.sum(axis=0) if bias is not None else None
    grad_flat = grad_out @ weights.T
    return Tensor4.wrap(grad_flat.reshape(x.data.shape).copy()), grad_w, grad_b


# -- softmax cross-entropy ---------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of integer class labels."""
    if logits.shape[0] != labels.shape[0]:
        raise ValueError("logits/labels batch size mismatch")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    nll = logsumexp - z[np.arange(len(labels)), labels]
    return float(nll.mean())


def softmax_cross_entropy_backward(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    grad = softmax(logits)
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / len(labels)


# -- dropout ---------------------------------------------------------


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    return rng.random(shape) >= rate


def dropout(
    x: Tensor4, rate: float, train_mode: bool, rng: np.random.Generator | None = None
) -> Tensor4:
    """Inverted dropout: zero a `rate` fraction and rescale the rest by
    1/(1-rate) so the expected activation is unchanged; identity in eval mode."""
    if not train_mode or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an RNG")
    mask = dropout_mask(x.data.shape, rate, rng)
    return Tensor4.wrap(x.data * mask / (1.0 - rate))
