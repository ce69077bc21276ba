"""Trainable layer objects and the sequential network container.

Layer classes wrap the functional forward/backward pairs with parameter
storage and a forward-pass cache, exposing a uniform interface:

    out = layer.forward(x, train_mode)
    grad_in = layer.backward(grad_out)   # consumes the cached forward state
    layer.params() / layer.grads()       # aligned name -> array dicts
    layer.state()                        # params plus running statistics

Parameter arrays are mutated in place by the optimizer; gradients are
repopulated by each backward call. `build_model` turns a declarative
`ModelSpec` into a `Network` with deterministic seeded initialization
(zero-mean Gaussians with variance 2/fan_in, the standard choice for ReLU
stacks; norm scale 1, shift 0; no conv biases, the norm shift covers them).
"""

from __future__ import annotations

import numpy as np

from . import basic, blocks, conv, intra, topology
from .models import LayerPlacement, ModelSpec, walk
from .tensor import PRECISIONS, Tensor4, add, relu
from .basic import BatchNormState, relu_backward


class Layer:
    name = "layer"

    def forward(self, x, train_mode=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def state(self) -> dict[str, np.ndarray]:
        return self.params()


def _norm_state_entries(prefix: str, norm: BatchNormState | None) -> dict[str, np.ndarray]:
    if norm is None:
        return {}
    return {
        f"{prefix}scale": norm.scale,
        f"{prefix}shift": norm.shift,
        f"{prefix}running_mean": norm.running_mean,
        f"{prefix}running_var": norm.running_var,
    }


class ConvLayer(Layer):
    """Dense or grouped convolution with optional norm / residual / ReLU.

    Covers the 7x7 stem, the baseline 3x3 layers, 1x1 channel transitions and
    the grouped scheme. The residual add requires matching shapes and is only
    enabled by the builder when input and output channels agree.
    """

    def __init__(self, kernel, stride=1, pad=0, groups=1, norm=None, residual=False, with_relu=True, name="conv"):
        self.kernel = kernel
        self.stride, self.pad, self.groups = stride, pad, groups
        self.norm, self.residual, self.with_relu = norm, residual, with_relu
        self.name = name
        self._cache = None
        self._grads = None

    def forward(self, x, train_mode=False):
        if self.groups > 1:
            y = conv.grouped_conv(x, self.kernel, self.groups, pad=self.pad, stride=self.stride)
        else:
            y = conv.conv_standard(x, self.kernel, pad=self.pad, stride=self.stride)
        conv_out = y
        if self.norm is not None:
            y = basic.batchnorm_forward(y, self.norm, train_mode, update_running=train_mode)
        pre = add(y, x) if self.residual else y
        out = relu(pre) if self.with_relu else pre
        self._cache = (x, conv_out, pre, train_mode)
        return out

    def backward(self, grad):
        x, conv_out, pre, train_mode = self._cache
        if self.with_relu:
            grad = relu_backward(pre, grad)
        grad_pre = grad
        if self.norm is not None:
            grad, g_scale, g_shift = basic.batchnorm_backward(conv_out, self.norm, grad, train_mode)
        else:
            g_scale = g_shift = None
        if self.groups > 1:
            gx, gw = conv.grouped_conv_backward(x, self.kernel, self.groups, grad, pad=self.pad, stride=self.stride)
        else:
            gx, gw = conv.conv_standard_backward(x, self.kernel, grad, pad=self.pad, stride=self.stride)
        if self.residual:
            gx = add(gx, grad_pre)
        self._grads = {"weights": gw}
        if g_scale is not None:
            self._grads["norm.scale"] = g_scale
            self._grads["norm.shift"] = g_shift
        return gx

    def params(self):
        out = {"weights": self.kernel.weights}
        if self.norm is not None:
            out["norm.scale"] = self.norm.scale
            out["norm.shift"] = self.norm.shift
        return out

    def grads(self):
        return self._grads

    def state(self):
        return {"weights": self.kernel.weights, **_norm_state_entries("norm.", self.norm)}


class SICLayer(Layer):
    """One or more chained SIC iterations (single-filter conv + projection +
    norm + residual + ReLU)."""

    def __init__(self, iterations, name="sic"):
        self.iterations = list(iterations)
        self.name = name
        self._cache = None
        self._grads = None

    def forward(self, x, train_mode=False):
        out, caches = blocks._sic_forward(x, self.iterations, train_mode, update_running=train_mode)
        self._cache = (caches, train_mode)
        return out

    def backward(self, grad):
        caches, train_mode = self._cache
        gx, grads = blocks._sic_backward_from_cache(self.iterations, caches, grad, train_mode)
        self._grads = {}
        for i, g in enumerate(grads):
            self._grads[f"iter{i}.conv"] = g.conv
            self._grads[f"iter{i}.project"] = g.project
            if g.norm_scale is not None:
                self._grads[f"iter{i}.norm.scale"] = g.norm_scale
                self._grads[f"iter{i}.norm.shift"] = g.norm_shift
        return gx

    def params(self):
        out = {}
        for i, it in enumerate(self.iterations):
            out[f"iter{i}.conv"] = it.conv.weights
            out[f"iter{i}.project"] = it.project.weights
            if it.norm is not None:
                out[f"iter{i}.norm.scale"] = it.norm.scale
                out[f"iter{i}.norm.shift"] = it.norm.shift
        return out

    def grads(self):
        return self._grads

    def state(self):
        out = {}
        for i, it in enumerate(self.iterations):
            out[f"iter{i}.conv"] = it.conv.weights
            out[f"iter{i}.project"] = it.project.weights
            out.update(_norm_state_entries(f"iter{i}.norm.", it.norm))
        return out


class SICTopoLayer(Layer):
    """SIC iteration whose channel projection is topologically subdivisioned:
    a 1x1 sparse projection reading only wrap-around channel neighbors."""

    def __init__(self, conv_kernel, project_kernel, topo, norm=None, name="sic_topo"):
        self.conv_kernel = conv_kernel
        self.project_kernel = project_kernel  # TopoKernel with 1x1 spatial extent
        self.topo = topo
        self.norm = norm
        self.name = name
        self._cache = None
        self._grads = None

    def forward(self, x, train_mode=False):
        k = self.conv_kernel.kernel_size[0]
        spatial = intra.intra_channel_conv(x, self.conv_kernel, pad=(k - 1) // 2)
        projected = topology.topo_conv(spatial, self.project_kernel, self.topo)
        normed = (
            basic.batchnorm_forward(projected, self.norm, train_mode, update_running=train_mode)
            if self.norm
            else projected
        )
        pre = add(x, normed)
        self._cache = (x, spatial, projected, pre, train_mode)
        return relu(pre)

    def backward(self, grad):
        x, spatial, projected, pre, train_mode = self._cache
        k = self.conv_kernel.kernel_size[0]
        grad_pre = relu_backward(pre, grad)
        if self.norm is not None:
            grad_proj, g_scale, g_shift = basic.batchnorm_backward(projected, self.norm, grad_pre, train_mode)
        else:
            grad_proj, g_scale, g_shift = grad_pre, None, None
        grad_spatial, g_pk = topology.topo_conv_backward(spatial, self.project_kernel, self.topo, grad_proj)
        gx, g_ck = intra.intra_channel_conv_backward(x, self.conv_kernel, grad_spatial, pad=(k - 1) // 2)
        gx = add(gx, grad_pre)
        self._grads = {"conv": g_ck, "project": g_pk}
        if g_scale is not None:
            self._grads["norm.scale"] = g_scale
            self._grads["norm.shift"] = g_shift
        return gx

    def params(self):
        out = {"conv": self.conv_kernel.weights, "project": self.project_kernel.weights}
        if self.norm is not None:
            out["norm.scale"] = self.norm.scale
            out["norm.shift"] = self.norm.shift
        return out

    def grads(self):
        return self._grads

    def state(self):
        return {
            "conv": self.conv_kernel.weights,
            "project": self.project_kernel.weights,
            **_norm_state_entries("norm.", self.norm),
        }


class UnraveledLayer(Layer):
    def __init__(self, kernel, project, norm=None, name="unraveled"):
        self.kernel, self.project, self.norm = kernel, project, norm
        self.name = name
        self._cache = None
        self._grads = None

    def forward(self, x, train_mode=False):
        out, cache = blocks._unraveled_forward(
            x, self.kernel, self.project, self.norm, train_mode, update_running=train_mode
        )
        self._cache = (x, cache, train_mode)
        return out

    def backward(self, grad):
        x, cache, train_mode = self._cache
        gx, g = blocks._unraveled_backward_from_cache(
            x, self.kernel, self.project, cache, grad, self.norm, train_mode
        )
        self._grads = {"filters": g.filters, "project": g.project}
        if g.norm_scale is not None:
            self._grads["norm.scale"] = g.norm_scale
            self._grads["norm.shift"] = g.norm_shift
        return gx

    def params(self):
        out = {"filters": self.kernel.weights, "project": self.project.weights}
        if self.norm is not None:
            out["norm.scale"] = self.norm.scale
            out["norm.shift"] = self.norm.shift
        return out

    def grads(self):
        return self._grads

    def state(self):
        return {
            "filters": self.kernel.weights,
            "project": self.project.weights,
            **_norm_state_entries("norm.", self.norm),
        }


class TopoConvLayer(Layer):
    def __init__(self, kernel, topo, norm=None, residual=True, name="topo"):
        self.kernel, self.topo, self.norm, self.residual = kernel, topo, norm, residual
        self.name = name
        self._cache = None
        self._grads = None

    def forward(self, x, train_mode=False):
        y = topology.topo_conv(x, self.kernel, self.topo)
        conv_out = y
        if self.norm is not None:
            y = basic.batchnorm_forward(y, self.norm, train_mode, update_running=train_mode)
        pre = add(y, x) if self.residual else y
        self._cache = (x, conv_out, pre, train_mode)
        return relu(pre)

    def backward(self, grad):
        x, conv_out, pre, train_mode = self._cache
        grad = relu_backward(pre, grad)
        grad_pre = grad
        if self.norm is not None:
            grad, g_scale, g_shift = basic.batchnorm_backward(conv_out, self.norm, grad, train_mode)
        else:
            g_scale = g_shift = None
        gx, gw = topology.topo_conv_backward(x, self.kernel, self.topo, grad)
        if self.residual:
            gx = add(gx, grad_pre)
        self._grads = {"weights": gw}
        if g_scale is not None:
            self._grads["norm.scale"] = g_scale
            self._grads["norm.shift"] = g_shift
        return gx

    def params(self):
        out = {"weights": self.kernel.weights}
        if self.norm is not None:
            out["norm.scale"] = self.norm.scale
            out["norm.shift"] = self.norm.shift
        return out

    def grads(self):
        return self._grads

    def state(self):
        return {"weights": self.kernel.weights, **_norm_state_entries("norm.", self.norm)}


class SpatialBottleneckLayer(Layer):
    def __init__(self, conv_kernel, project, deconv_kernel, pad, norm=None, name="spatial_bottleneck"):
        self.conv_kernel, self.project, self.deconv_kernel = conv_kernel, project, deconv_kernel
        self.pad, self.norm = pad, norm
        self.name = name
        self._cache = None
        self._grads = None

    def forward(self, x, train_mode=False):
        out, cache = blocks._spatial_bottleneck_forward(
            x, self.conv_kernel, self.project, self.deconv_kernel, self.pad,
            self.norm, train_mode, update_running=train_mode,
        )
        self._cache = (cache, train_mode)
        return out

    def backward(self, grad):
        cache, train_mode = self._cache
        gx, g = blocks._spatial_bottleneck_backward_from_cache(
            self.conv_kernel, self.project, self.deconv_kernel, cache, grad,
            self.pad, self.norm, train_mode,
        )
        self._grads = {"conv": g.conv, "project": g.project, "deconv": g.deconv}
        if g.norm_scale is not None:
            self._grads["norm.scale"] = g.norm_scale
            self._grads["norm.shift"] = g.norm_shift
        return gx

    def params(self):
        out = {
            "conv": self.conv_kernel.weights,
            "project": self.project.weights,
            "deconv": self.deconv_kernel.weights,
        }
        if self.norm is not None:
            out["norm.scale"] = self.norm.scale
            out["norm.shift"] = self.norm.shift
        return out

    def grads(self):
        return self._grads

    def state(self):
        return {
            "conv": self.conv_kernel.weights,
            "project": self.project.weights,
            "deconv": self.deconv_kernel.weights,
            **_norm_state_entries("norm.", self.norm),
        }


class ChannelBottleneckLayer(Layer):
    def __init__(self, params: blocks.ChannelBottleneckParams, name="channel_bottleneck"):
        self.block = params
        self.name = name
        self._cache = None
        self._grads = None

    def forward(self, x, train_mode=False):
        out, cache = blocks._channel_bottleneck_forward(x, self.block, train_mode, update_running=train_mode)
        self._cache = (x, cache, train_mode)
        return out

    def backward(self, grad):
        x, cache, train_mode = self._cache
        gx, g = blocks._channel_bottleneck_backward_from_cache(x, self.block, cache, grad, train_mode)
        self._grads = {
            "reduce.conv": g.reduce_conv,
            "reduce.project": g.reduce_project,
            "expand.conv": g.expand_conv,
            "expand.project": g.expand_project,
        }
        if g.reduce_norm_scale is not None:
            self._grads["reduce.norm.scale"] = g.reduce_norm_scale
            self._grads["reduce.norm.shift"] = g.reduce_norm_shift
            self._grads["expand.norm.scale"] = g.expand_norm_scale
            self._grads["expand.norm.shift"] = g.expand_norm_shift
        return gx

    def params(self):
        b = self.block
        out = {
            "reduce.conv": b.reduce_conv.weights,
            "reduce.project": b.reduce_project.weights,
            "expand.conv": b.expand_conv.weights,
            "expand.project": b.expand_project.weights,
        }
        if b.reduce_norm is not None:
            out["reduce.norm.scale"] = b.reduce_norm.scale
            out["reduce.norm.shift"] = b.reduce_norm.shift
            out["expand.norm.scale"] = b.expand_norm.scale
            out["expand.norm.shift"] = b.expand_norm.shift
        return out

    def grads(self):
        return self._grads

    def state(self):
        b = self.block
        return {
            "reduce.conv": b.reduce_conv.weights,
            "reduce.project": b.reduce_project.weights,
            "expand.conv": b.expand_conv.weights,
            "expand.project": b.expand_project.weights,
            **_norm_state_entries("reduce.norm.", b.reduce_norm),
            **_norm_state_entries("expand.norm.", b.expand_norm),
        }


class MaxPoolLayer(Layer):
    def __init__(self, window, stride, name="pool_max"):
        self.window, self.stride = window, stride
        self.name = name
        self._x = None

    def forward(self, x, train_mode=False):
        self._x = x
        return basic.max_pool(x, self.window, self.stride)

    def backward(self, grad):
        return basic.max_pool_backward(self._x, self.window, self.stride, grad)


class AvgPoolLayer(Layer):
    def __init__(self, window, stride, name="pool_avg"):
        self.window, self.stride = window, stride
        self.name = name
        self._x = None

    def forward(self, x, train_mode=False):
        self._x = x
        return basic.avg_pool(x, self.window, self.stride)

    def backward(self, grad):
        return basic.avg_pool_backward(self._x, self.window, self.stride, grad)


class FullyConnectedLayer(Layer):
    """Affine map on flattened features; accepts a Tensor4 or a 2D batch."""

    def __init__(self, weights, bias, with_relu=False, name="fc"):
        self.weights, self.bias, self.with_relu = weights, bias, with_relu
        self.name = name
        self._cache = None
        self._grads = None

    def forward(self, x, train_mode=False):
        flat = x.data.reshape(x.shape.batch, -1) if isinstance(x, Tensor4) else x
        out = flat @ self.weights + self.bias
        self._cache = (x, flat, out)
        return np.maximum(out, 0) if self.with_relu else out

    def backward(self, grad):
        x, flat, pre = self._cache
        if self.with_relu:
            grad = grad * (pre > 0)
        self._grads = {"weights": flat.T @ grad, "bias": grad.sum(axis=0)}
        grad_flat = grad @ self.weights.T
        if isinstance(x, Tensor4):
            return Tensor4.wrap(grad_flat.reshape(x.data.shape).copy())
        return grad_flat

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def grads(self):
        return self._grads


class DropoutLayer(Layer):
    """Inverted dropout on 2D activations; the RNG is owned by the network."""

    def __init__(self, rate, name="dropout"):
        self.rate = rate
        self.rng: np.random.Generator | None = None
        self.name = name
        self._mask = None

    def forward(self, x, train_mode=False):
        if not train_mode or self.rate == 0.0:
            self._mask = None
            return x
        if self.rng is None:
            raise RuntimeError("dropout layer has no RNG; build the network first")
        self._mask = basic.dropout_mask(np.shape(x), self.rate, self.rng)
        return x * self._mask / (1.0 - self.rate)

    def backward(self, grad):
        if self._mask is None:
            return grad
        return grad * self._mask / (1.0 - self.rate)


class Network:
    """Sequential stack ending in class logits; trained with softmax
    cross-entropy (the softmax itself lives in the loss, not in a layer)."""

    def __init__(self, layers: list[Layer], name: str, num_classes: int, seed: int, precision: str):
        self.layers = layers
        self.name = name
        self.num_classes = num_classes
        self.seed = seed
        self.precision = precision
        self.dropout_rng = np.random.default_rng((seed, 0xD0))
        for layer in layers:
            if isinstance(layer, DropoutLayer):
                layer.rng = self.dropout_rng

    def forward(self, x: Tensor4, train_mode: bool = False) -> np.ndarray:
        out = x
        for layer in self.layers:
            out = layer.forward(out, train_mode)
        return out

    def backward(self, grad_logits: np.ndarray) -> Tensor4:
        grad = grad_logits
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[f"{i:02d}.{layer.name}/{name}"] = arr
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            g = layer.grads()
            if not g:
                continue
            for name, arr in g.items():
                out[f"{i:02d}.{layer.name}/{name}"] = arr
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.state().items():
                out[f"{i:02d}.{layer.name}/{name}"] = arr
        return out

    def load_state(self, entries: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(entries)
        extra = set(entries) - set(own)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for key, arr in own.items():
            src = entries[key]
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {key}: {src.shape} vs {arr.shape}")
            arr[...] = src.astype(arr.dtype, copy=False)

    def num_parameters(self) -> int:
        return sum(a.size for a in self.parameters().values())


# -- construction from a spec -------------------------------------------------------------


def _gaussian(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _make_norm(n, dtype) -> BatchNormState:
    return BatchNormState(np.ones(n, dtype=dtype), np.zeros(n, dtype=dtype))


def _sic_iteration(rng, n, k, dtype) -> blocks.SicIteration:
    return blocks.SicIteration(
        intra.IntraChannelKernel(_gaussian(rng, (n, k, k), k * k, dtype)),
        intra.ProjectionMatrix(_gaussian(rng, (n, n), n, dtype)),
        _make_norm(n, dtype),
    )


def _build_layer(p: LayerPlacement, rng, dtype) -> Layer:
    s = p.spec.scheme
    k = p.spec.kernel_size or 1
    n_in, n_out = p.in_channels, p.out_channels
    if s in ("standard", "project1x1"):
        kern = conv.ConvKernel(_gaussian(rng, (n_out, n_in, k, k), n_in * k * k, dtype))
        return ConvLayer(
            kern,
            stride=p.spec.stride or 1,
            pad=p.spec.effective_pad,
            norm=_make_norm(n_out, dtype),
            residual=(n_in == n_out and (p.spec.stride or 1) == 1),
            name=s,
        )
    if s == "grouped":
        g = p.spec.groups
        kern = conv.ConvKernel(_gaussian(rng, (n_out, n_in, k, k), (n_in // g) * k * k, dtype))
        return ConvLayer(
            kern, stride=1, pad=p.spec.effective_pad, groups=g,
            norm=_make_norm(n_out, dtype), residual=n_in == n_out, name=s,
        )
    if s == "sic":
        if p.spec.topology is not None:
            topo = p.spec.topology
            return SICTopoLayer(
                intra.IntraChannelKernel(_gaussian(rng, (n_out, k, k), k * k, dtype)),
                topology.TopoKernel(
                    _gaussian(rng, (n_out, topo.neighbor_count, 1, 1), topo.neighbor_count, dtype)
                ),
                topo,
                norm=_make_norm(n_out, dtype),
            )
        reps = p.spec.iterations or 1
        return SICLayer([_sic_iteration(rng, n_out, k, dtype) for _ in range(reps)])
    if s == "unraveled":
        b = p.spec.filters_per_channel
        return UnraveledLayer(
            blocks.UnraveledKernel(_gaussian(rng, (n_out, b, k, k), k * k, dtype)),
            intra.ProjectionMatrix(_gaussian(rng, (n_out * b, n_out), n_out * b, dtype)),
            norm=_make_norm(n_out, dtype),
        )
    if s == "topo":
        topo = p.spec.topology
        kern = topology.TopoKernel(
            _gaussian(rng, (n_out, topo.neighbor_count, k, k), topo.neighbor_count * k * k, dtype)
        )
        return TopoConvLayer(kern, topo, norm=_make_norm(n_out, dtype))
    if s == "spatial_bottleneck":
        return SpatialBottleneckLayer(
            intra.IntraChannelKernel(_gaussian(rng, (n_out, k, k), k * k, dtype), stride=k),
            intra.ProjectionMatrix(_gaussian(rng, (n_out, n_out), n_out, dtype)),
            intra.IntraChannelKernel(_gaussian(rng, (n_out, k, k), k * k, dtype), stride=k),
            pad=p.spec.pad,
            norm=_make_norm(n_out, dtype),
        )
    if s == "channel_bottleneck":
        half = n_out // 2
        params = blocks.ChannelBottleneckParams(
            reduce_conv=intra.IntraChannelKernel(_gaussian(rng, (n_out, k, k), k * k, dtype)),
            reduce_project=intra.ProjectionMatrix(_gaussian(rng, (n_out, half), n_out, dtype)),
            expand_conv=intra.IntraChannelKernel(_gaussian(rng, (half, k, k), k * k, dtype)),
            expand_project=intra.ProjectionMatrix(_gaussian(rng, (half, n_out), half, dtype)),
            reduce_norm=_make_norm(half, dtype),
            expand_norm=_make_norm(n_out, dtype),
        )
        return ChannelBottleneckLayer(params)
    if s == "pool_max":
        return MaxPoolLayer(p.spec.window, p.spec.stride)
    if s == "pool_avg":
        return AvgPoolLayer(p.spec.window, p.spec.stride)
    if s == "fully_connected":
        w = _gaussian(rng, (n_in, p.spec.out_features), n_in, dtype)
        return FullyConnectedLayer(w, np.zeros(p.spec.out_features, dtype=dtype), with_relu=p.spec.with_relu)
    raise ValueError(f"no trainable layer for scheme {s!r}")


def build_model(spec: ModelSpec, seed: int = 0, precision: str = "single") -> Network:
    """Instantiate a spec as a trainable network with seeded initialization."""
    dtype = PRECISIONS[precision]
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    for p in walk(spec):
        if p.spec.scheme == "softmax":
            continue  # folded into the cross-entropy loss
        layer = _build_layer(p, rng, dtype)
        layers.append(layer)
        if p.spec.scheme == "fully_connected" and p.spec.dropout > 0:
            layers.append(DropoutLayer(p.spec.dropout))
    return Network(layers, spec.name, spec.num_classes, seed, precision)
