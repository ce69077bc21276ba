"""Central finite-difference verification of every layer's backward pass.

For each layer type the registry builds a randomized double-precision
instance: a forward closure, the set of differentiable arrays (parameters and
the input), and an analytic-backward closure. The checker perturbs every
scalar entry by +/-step, compares the numeric gradient of
J = sum(forward() * upstream) against the hand-written backward, and reports
the worst relative error.

Layers containing ReLU or max-pooling are only piecewise differentiable, so a
candidate instance is accepted only if its activations keep a safety margin
from the kinks; otherwise the instance is redrawn deterministically from the
next sub-seed. Rejection is decided before any gradient is compared.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import basic, blocks, conv, intra, topology
from .tensor import Tensor4

KINK_MARGIN = 1e-3


@dataclass
class GradCheckCase:
    forward: Callable[[], np.ndarray]
    arrays: dict[str, np.ndarray]
    analytic: Callable[[np.ndarray], dict[str, np.ndarray]]
    margin: Callable[[], float] = lambda: np.inf
    scalar: bool = False  # forward already returns the objective


@dataclass
class GradCheckResult:
    layer: str
    max_rel_err: float
    tolerance: float
    instances: int
    entries_checked: int
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _relu_margins(*pre_tensors) -> float:
    return min(float(np.min(np.abs(t.data))) for t in pre_tensors)


# -- case builders ---------------------------------------------------------


def _case_conv(rng, d):
    x = rng.standard_normal((d["batch"], d["channels"], d["spatial"], d["spatial"]))
    w = rng.standard_normal((d["channels"], d["channels"], d["kernel_size"], d["kernel_size"]))
    kern = conv.ConvKernel(w)
    pad = (d["kernel_size"] - 1) // 2

    def forward():
        return conv.conv_standard(Tensor4(x), kern, pad=pad).data

    def analytic(g):
        gx, gw = conv.conv_standard_backward(Tensor4(x), kern, Tensor4(g), pad=pad)
        return {"input": gx.data, "weights": gw}

    return GradCheckCase(forward, {"input": x, "weights": w}, analytic)


def _case_grouped(rng, d):
    n = max(2, d["channels"] - d["channels"] % 2)
    x = rng.standard_normal((d["batch"], n, d["spatial"], d["spatial"]))
    w = rng.standard_normal((n, n, d["kernel_size"], d["kernel_size"]))
    kern = conv.ConvKernel(w)
    pad = (d["kernel_size"] - 1) // 2

    def forward():
        return conv.grouped_conv(Tensor4(x), kern, 2, pad=pad).data

    def analytic(g):
        gx, gw = conv.grouped_conv_backward(Tensor4(x), kern, 2, Tensor4(g), pad=pad)
        return {"input": gx.data, "weights": gw}

    return GradCheckCase(forward, {"input": x, "weights": w}, analytic)


def _case_intra(rng, d):
    x = rng.standard_normal((d["batch"], d["channels"], d["spatial"], d["spatial"]))
    w = rng.standard_normal((d["channels"], d["kernel_size"], d["kernel_size"]))
    kern = intra.IntraChannelKernel(w, stride=d.get("stride", 2))
    ho = (d["spatial"] - d["kernel_size"]) // kern.stride + 1
    if ho < 1:
        raise ValueError("spatial extent too small for the kernel")

    def forward():
        return intra.intra_channel_conv(Tensor4(x), kern, pad=0).data

    def analytic(g):
        gx, gw = intra.intra_channel_conv_backward(Tensor4(x), kern, Tensor4(g), pad=0)
        return {"input": gx.data, "weights": gw}

    return GradCheckCase(forward, {"input": x, "weights": w}, analytic)


def _case_deconv(rng, d):
    k = d["kernel_size"]
    x = rng.standard_normal((d["batch"], d["channels"], d["spatial"], d["spatial"]))
    w = rng.standard_normal((d["channels"], k, k))
    kern = intra.IntraChannelKernel(w, stride=k)

    def forward():
        return intra.intra_channel_deconv(Tensor4(x), kern).data

    def analytic(g):
        gx, gw = intra.intra_channel_deconv_backward(Tensor4(x), kern, Tensor4(g))
        return {"input": gx.data, "weights": gw}

    return GradCheckCase(forward, {"input": x, "weights": w}, analytic)


def _case_projection(rng, d):
    n = d["channels"]
    x = rng.standard_normal((d["batch"], n, d["spatial"], d["spatial"]))
    w = rng.standard_normal((n, n))
    p = intra.ProjectionMatrix(w)

    def forward():
        return intra.linear_projection(Tensor4(x), p).data

    def analytic(g):
        gx, gw, _ = intra.linear_projection_backward(Tensor4(x), p, Tensor4(g))
        return {"input": gx.data, "weights": gw}

    return GradCheckCase(forward, {"input": x, "weights": w}, analytic)


def _sic_params(rng, n, k, iterations, with_norm=True):
    its = []
    for _ in range(iterations):
        its.append(
            blocks.SicIteration(
                intra.IntraChannelKernel(rng.standard_normal((n, k, k)) * 0.5),
                intra.ProjectionMatrix(rng.standard_normal((n, n)) * 0.4),
                basic.BatchNormState(
                    rng.standard_normal(n) * 0.3 + 1.0, rng.standard_normal(n) * 0.3
                )
                if with_norm
                else None,
            )
        )
    return its


def _case_sic(rng, d):
    n, k = d["channels"], d["kernel_size"]
    its = _sic_params(rng, n, k, d.get("iterations", 2))
    x = rng.standard_normal((d["batch"], n, d["spatial"], d["spatial"]))
    arrays = {"input": x}
    for i, it in enumerate(its):
        arrays[f"iter{i}.conv"] = it.conv.weights
        arrays[f"iter{i}.project"] = it.project.weights
        arrays[f"iter{i}.norm_scale"] = it.norm.scale
        arrays[f"iter{i}.norm_shift"] = it.norm.shift

    def forward():
        return blocks.sic_layer_forward(Tensor4(x), its, train_mode=True).data

    def analytic(g):
        gx, grads = blocks.sic_layer_backward(Tensor4(x), its, Tensor4(g), train_mode=True)
        out = {"input": gx.data}
        for i, gr in enumerate(grads):
            out[f"iter{i}.conv"] = gr.conv
            out[f"iter{i}.project"] = gr.project
            out[f"iter{i}.norm_scale"] = gr.norm_scale
            out[f"iter{i}.norm_shift"] = gr.norm_shift
        return out

    def margin():
        _, caches = blocks._sic_forward(Tensor4(x), its, True, update_running=False)
        return _relu_margins(*(c[3] for c in caches))

    return GradCheckCase(forward, arrays, analytic, margin)


def _case_unraveled(rng, d):
    n, k = d["channels"], d["kernel_size"]
    b = d.get("filters", 2)
    kern = blocks.UnraveledKernel(rng.standard_normal((n, b, k, k)) * 0.5)
    p = intra.ProjectionMatrix(rng.standard_normal((n * b, n)) * 0.3)
    norm = basic.BatchNormState(rng.standard_normal(n) * 0.3 + 1.0, rng.standard_normal(n) * 0.3)
    x = rng.standard_normal((d["batch"], n, d["spatial"], d["spatial"]))
    arrays = {
        "input": x,
        "filters": kern.weights,
        "project": p.weights,
        "norm_scale": norm.scale,
        "norm_shift": norm.shift,
    }

    def forward():
        return blocks.unraveled_conv(Tensor4(x), kern, p, norm, train_mode=True).data

    def analytic(g):
        gx, gr = blocks.unraveled_conv_backward(Tensor4(x), kern, p, Tensor4(g), norm, train_mode=True)
        return {
            "input": gx.data,
            "filters": gr.filters,
            "project": gr.project,
            "norm_scale": gr.norm_scale,
            "norm_shift": gr.norm_shift,
        }

    def margin():
        _, (_, _, pre) = blocks._unraveled_forward(Tensor4(x), kern, p, norm, True, False)
        return _relu_margins(pre)

    return GradCheckCase(forward, arrays, analytic, margin)


def _case_topo(rng, d):
    topo = d.get("topology")
    if topo is None:
        n = d["channels"]
        dims = (2, n // 2) if n % 2 == 0 and n > 2 else (n,)
        nbhd = tuple(max(1, v // 2) for v in dims)
        topo = topology.TopologyConfig(dims, nbhd)
    k = d["kernel_size"]
    kern = topology.TopoKernel(
        rng.standard_normal((topo.channels, topo.neighbor_count, k, k))
    )
    x = rng.standard_normal((d["batch"], topo.channels, d["spatial"], d["spatial"]))

    def forward():
        return topology.topo_conv(Tensor4(x), kern, topo).data

    def analytic(g):
        gx, gw = topology.topo_conv_backward(Tensor4(x), kern, topo, Tensor4(g))
        return {"input": gx.data, "weights": gw}

    return GradCheckCase(forward, {"input": x, "weights": kern.weights}, analytic)


def _case_spatial_bottleneck(rng, d):
    n = d["channels"]
    k = d.get("bottleneck_stride", 2)
    pad = d.get("pad", 0)
    ck = intra.IntraChannelKernel(rng.standard_normal((n, k, k)) * 0.6, stride=k)
    dk = intra.IntraChannelKernel(rng.standard_normal((n, k, k)) * 0.6, stride=k)
    p = intra.ProjectionMatrix(rng.standard_normal((n, n)) * 0.4)
    norm = basic.BatchNormState(rng.standard_normal(n) * 0.3 + 1.0, rng.standard_normal(n) * 0.3)
    x = rng.standard_normal((d["batch"], n, d["spatial"], d["spatial"]))
    arrays = {
        "input": x,
        "conv": ck.weights,
        "project": p.weights,
        "deconv": dk.weights,
        "norm_scale": norm.scale,
        "norm_shift": norm.shift,
    }

    def forward():
        return blocks.spatial_bottleneck_forward(
            Tensor4(x), ck, p, dk, pad=pad, norm=norm, train_mode=True
        ).data

    def analytic(g):
        gx, gr = blocks.spatial_bottleneck_backward(
            Tensor4(x), ck, p, dk, Tensor4(g), pad=pad, norm=norm, train_mode=True
        )
        return {
            "input": gx.data,
            "conv": gr.conv,
            "project": gr.project,
            "deconv": gr.deconv,
            "norm_scale": gr.norm_scale,
            "norm_shift": gr.norm_shift,
        }

    def margin():
        _, cache = blocks._spatial_bottleneck_forward(Tensor4(x), ck, p, dk, pad, norm, True, False)
        return _relu_margins(cache[4])

    return GradCheckCase(forward, arrays, analytic, margin)


def _case_channel_bottleneck(rng, d):
    n = max(4, d["channels"] - d["channels"] % 2)
    k = d["kernel_size"]
    half = n // 2
    params = blocks.ChannelBottleneckParams(
        reduce_conv=intra.IntraChannelKernel(rng.standard_normal((n, k, k)) * 0.5),
        reduce_project=intra.ProjectionMatrix(rng.standard_normal((n, half)) * 0.4),
        expand_conv=intra.IntraChannelKernel(rng.standard_normal((half, k, k)) * 0.5),
        expand_project=intra.ProjectionMatrix(rng.standard_normal((half, n)) * 0.4),
        reduce_norm=basic.BatchNormState(
            rng.standard_normal(half) * 0.3 + 1.0, rng.standard_normal(half) * 0.3
        ),
        expand_norm=basic.BatchNormState(
            rng.standard_normal(n) * 0.3 + 1.0, rng.standard_normal(n) * 0.3
        ),
    )
    x = rng.standard_normal((d["batch"], n, d["spatial"], d["spatial"]))
    arrays = {
        "input": x,
        "reduce_conv": params.reduce_conv.weights,
        "reduce_project": params.reduce_project.weights,
        "expand_conv": params.expand_conv.weights,
        "expand_project": params.expand_project.weights,
        "reduce_norm_scale": params.reduce_norm.scale,
        "reduce_norm_shift": params.reduce_norm.shift,
        "expand_norm_scale": params.expand_norm.scale,
        "expand_norm_shift": params.expand_norm.shift,
    }

    def forward():
        return blocks.channelwise_bottleneck_block(Tensor4(x), params, train_mode=True).data

    def analytic(g):
        gx, gr = blocks.channelwise_bottleneck_backward(Tensor4(x), params, Tensor4(g), train_mode=True)
        return {
            "input": gx.data,
            "reduce_conv": gr.reduce_conv,
            "reduce_project": gr.reduce_project,
            "expand_conv": gr.expand_conv,
            "expand_project": gr.expand_project,
            "reduce_norm_scale": gr.reduce_norm_scale,
            "reduce_norm_shift": gr.reduce_norm_shift,
            "expand_norm_scale": gr.expand_norm_scale,
            "expand_norm_shift": gr.expand_norm_shift,
        }

    def margin():
        _, cache = blocks._channel_bottleneck_forward(Tensor4(x), params, True, False)
        return _relu_margins(cache[2], cache[6])

    return GradCheckCase(forward, arrays, analytic, margin)


def _case_batchnorm(rng, d):
    n = d["channels"]
    x = rng.standard_normal((max(2, d["batch"]), n, d["spatial"], d["spatial"]))
    state = basic.BatchNormState(
        rng.standard_normal(n) * 0.3 + 1.0, rng.standard_normal(n) * 0.3
    )

    def forward():
        return basic.batchnorm_forward(Tensor4(x), state, True, update_running=False).data

    def analytic(g):
        gx, gs, gb = basic.batchnorm_backward(Tensor4(x), state, Tensor4(g), train_mode=True)
        return {"input": gx.data, "scale": gs, "shift": gb}

    return GradCheckCase(forward, {"input": x, "scale": state.scale, "shift": state.shift}, analytic)


def _case_maxpool(rng, d):
    x = rng.standard_normal((d["batch"], d["channels"], d["spatial"], d["spatial"]))
    window = d.get("window", 2)
    stride = d.get("stride", 2)
    if d["spatial"] < window:
        raise ValueError("spatial extent smaller than the pooling window")

    def forward():
        return basic.max_pool(Tensor4(x), window, stride).data

    def analytic(g):
        return {"input": basic.max_pool_backward(Tensor4(x), window, stride, Tensor4(g)).data}

    def margin():
        win = conv.spatial_windows(x, window, window, stride)
        flat = win.reshape(win.shape[:4] + (-1,))
        top2 = np.sort(flat, axis=-1)[..., -2:]
        return float(np.min(top2[..., 1] - top2[..., 0]))

    return GradCheckCase(forward, {"input": x}, analytic, margin)


def _case_avgpool(rng, d):
    x = rng.standard_normal((d["batch"], d["channels"], d["spatial"], d["spatial"]))
    window = d.get("window", 2)
    stride = d.get("stride", 2)

    def forward():
        return basic.avg_pool(Tensor4(x), window, stride).data

    def analytic(g):
        return {"input": basic.avg_pool_backward(Tensor4(x), window, stride, Tensor4(g)).data}

    return GradCheckCase(forward, {"input": x}, analytic)


def _case_fc(rng, d):
    x = rng.standard_normal((d["batch"], d["channels"], d["spatial"], d["spatial"]))
    features = d["channels"] * d["spatial"] ** 2
    w = rng.standard_normal((features, d.get("out_features", 6)))
    b = rng.standard_normal(d.get("out_features", 6))

    def forward():
        return basic.fully_connected(Tensor4(x), w, b)

    def analytic(g):
        gx, gw, gb = basic.fully_connected_backward(Tensor4(x), w, g, bias=b)
        return {"input": gx.data, "weights": gw, "bias": gb}

    return GradCheckCase(forward, {"input": x, "weights": w, "bias": b}, analytic)


def _case_softmax_ce(rng, d):
    classes = d.get("out_features", 6)
    logits = rng.standard_normal((d["batch"], classes))
    labels = rng.integers(0, classes, size=d["batch"])

    def forward():
        return np.float64(basic.softmax_cross_entropy(logits, labels))

    def analytic(_):
        return {"logits": basic.softmax_cross_entropy_backward(logits, labels)}

    return GradCheckCase(forward, {"logits": logits}, analytic, scalar=True)


LAYER_REGISTRY: dict[str, Callable] = {
    "conv": _case_conv,
    "grouped": _case_grouped,
    "intra": _case_intra,
    "deconv": _case_deconv,
    "projection": _case_projection,
    "sic": _case_sic,
    "unraveled": _case_unraveled,
    "topo": _case_topo,
    "spatial_bottleneck": _case_spatial_bottleneck,
    "channel_bottleneck": _case_channel_bottleneck,
    "batchnorm": _case_batchnorm,
    "maxpool": _case_maxpool,
    "avgpool": _case_avgpool,
    "fc": _case_fc,
    "softmax_ce": _case_softmax_ce,
}

_DEFAULT_DIMS = {"channels": 4, "spatial": 5, "batch": 2, "kernel_size": 3}


def _build_well_posed(layer: str, seed: int, dims: dict, step: float, max_attempts: int = 12):
    builder = LAYER_REGISTRY[layer]
    for attempt in range(max_attempts):
        rng = np.random.default_rng((seed, attempt))
        case = builder(rng, dims)
        if case.margin() > max(KINK_MARGIN, 100 * step):
            return case, rng
    raise RuntimeError(f"could not draw a well-posed {layer} instance from seed {seed}")


def gradcheck_model(
    network,
    input_hw: tuple[int, int],
    channels: int = 3,
    *,
    batch: int = 2,
    seed: int = 0,
    step: float = 1e-6,
    tolerance: float = 1e-3,
    entries_per_group: int = 3,
) -> GradCheckResult:
    """Spot-check a whole model's gradients against finite differences.

    The objective is the softmax cross-entropy of the logits on a random
    batch (eval-mode forward, so normalization uses running statistics).
    `entries_per_group` random scalars of every parameter group and of the
    input are compared. Whole networks contain many ReLU kinks that finite
    differences can straddle, so the default tolerance is looser than the
    per-layer checks; the per-layer registry is the precise contract.
    """
    from .basic import softmax_cross_entropy, softmax_cross_entropy_backward
    from .tensor import Tensor4

    if network.precision != "double":
        raise ValueError("finite differences need a double-precision network")
    rng = np.random.default_rng((seed, 0x6C))
    x = rng.standard_normal((batch, channels, *input_hw))
    labels = rng.integers(0, network.num_classes, size=batch)

    def objective():
        return softmax_cross_entropy(network.forward(Tensor4(x), train_mode=False), labels)

    logits = network.forward(Tensor4(x), train_mode=False)
    grad_x = network.backward(softmax_cross_entropy_backward(logits, labels))
    analytic = dict(network.gradients())
    analytic["input"] = grad_x.data
    arrays = dict(network.parameters())
    arrays["input"] = x

    worst = 0.0
    checked = 0
    per_array: dict[str, float] = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        picks = rng.choice(flat.size, size=min(entries_per_group, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            hi = objective()
            flat[i] = orig - step
            lo = objective()
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            err = _rel_err(np.array([a_flat[i]]), np.array([numeric]))
            per_array[name] = max(per_array.get(name, 0.0), err)
            worst = max(worst, err)
            checked += 1
    return GradCheckResult(f"model:{network.name}", worst, tolerance, 1, checked, details=per_array)


def gradcheck_op(
    layer: str,
    *,
    seed: int = 0,
    instances: int = 1,
    step: float = 1e-5,
    tolerance: float = 1e-6,
    **dims,
) -> GradCheckResult:
    """Compare a layer's analytic backward against central finite differences
    over `instances` randomized instances; reports the worst relative error."""
    if layer not in LAYER_REGISTRY:
        raise KeyError(f"unknown layer {layer!r}; known: {sorted(LAYER_REGISTRY)}")
    d = dict(_DEFAULT_DIMS)
    d.update({k: v for k, v in dims.items() if v is not None})

    worst = 0.0
    checked = 0
    per_array: dict[str, float] = {}
    for inst in range(instances):
        case, rng = _build_well_posed(layer, seed * 7919 + inst, d, step)
        out = case.forward()
        if case.scalar:
            upstream = None
            objective = lambda: float(case.forward())
        else:
            g = rng.standard_normal(out.shape)
            upstream = g
            objective = lambda: float(np.sum(case.forward() * g))
        analytic = case.analytic(upstream)
        for name, arr in case.arrays.items():
            a = analytic[name]
            flat = arr.reshape(-1)
            numeric = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = objective()
                flat[i] = orig - step
                lo = objective()
                flat[i] = orig
                numeric[i] = (hi - lo) / (2 * step)
            err = _rel_err(a.reshape(-1), numeric)
            per_array[name] = max(per_array.get(name, 0.0), err)
            worst = max(worst, err)
            checked += flat.size
    return GradCheckResult(layer, worst, tolerance, instances, checked, details=per_array)
