"""Analytical multiplication and parameter counting for every layer scheme.

The complexity metric is the number of scalar multiplications in one forward
pass over a single image; additions, normalization, ReLU and pooling cost
zero multiplies and appear in reports as zero-cost lines. Ratios against a
baseline model are exact rationals computed from integer counts, never from
rounded floats.

Counting conventions:

* Dense convolution with same-size padding costs n_in*n_out*k^2 per output
  pixel; border pixels pay full price (multiplying by a padded zero is still
  a multiply).
* The spatial bottleneck is counted at its nominal internal resolution
  (h/k x w/k): conv = deconv = n*k^2*(h/k)*(w/k) = n*h*w and projection =
  n^2*(h/k)*(w/k). Its optional one-pixel border padding is excluded from the
  count; with pad = 0 the formula equals the exact multiply tally.
* Stage ratios cover the interchangeable core layers only: core-scheme layers
  that preserve their channel count. The shared stem (which widens channels),
  1x1 transitions, pooling and head are listed but excluded from ratios.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .models import CORE_SCHEMES, LayerPlacement, ModelSpec, walk
from .topology import TopologyConfig


def mults_standard(h: int, w: int, n_in: int, n_out: int, k: int) -> int:
    return n_in * n_out * k * k * h * w


def mults_unraveled(h: int, w: int, n: int, k: int, b: int) -> int:
    return b * (n * k * k + n * n) * h * w


def mults_sic(h: int, w: int, n: int, k: int) -> tuple[int, int]:
    """(intra-channel convolution, linear projection) multiply counts."""
    return n * k * k * h * w, n * n * h * w


def mults_topo(h: int, w: int, topo: TopologyConfig, k: int) -> int:
    return topo.channels * topo.neighbor_count * k * k * h * w


def mults_grouped(h: int, w: int, n_in: int, n_out: int, k: int, groups: int) -> int:
    return (n_in // groups) * n_out * k * k * h * w


def mults_spatial_bottleneck(h: int, w: int, n: int, k: int) -> tuple[int, int, int]:
    """(conv, projection, deconv) counts at the nominal h/k x w/k interior."""
    if h % k or w % k:
        raise ValueError(f"bottleneck stride {k} must divide the {h}x{w} resolution")
    hi, wi = h // k, w // k
    conv = n * k * k * hi * wi
    return conv, n * n * hi * wi, conv


def mults_channel_bottleneck(h: int, w: int, n: int, k: int) -> tuple[int, int, int, int]:
    """(reduce conv, reduce projection, expand conv, expand projection)."""
    if n % 2:
        raise ValueError("channel bottleneck needs an even channel count")
    half = n // 2
    return (n * k * k * h * w, n * half * h * w, half * k * k * h * w, half * n * h * w)


def mults_projection(h: int, w: int, n_in: int, n_out: int) -> int:
    return n_in * n_out * h * w


def mults_fully_connected(n_in: int, n_out: int) -> int:
    return n_in * n_out


@dataclass
class LayerCount:
    layer_id: str
    scheme: str
    stage: str
    mults: int
    params: int
    breakdown: dict[str, int] = field(default_factory=dict)
    core: bool = False


@dataclass
class ComplexityReport:
    model: str
    input_hw: tuple[int, int]
    baseline: str | None
    per_layer: list[LayerCount]
    stage_core_mults: dict[str, int]
    stage_ratios: dict[str, Fraction]
    overall_ratio: Fraction | None
    nominal_complexity: str | None = None

    @property
    def total_mults(self) -> int:
        return sum(l.mults for l in self.per_layer)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.per_layer)

    @property
    def core_mults(self) -> int:
        return sum(self.stage_core_mults.values())

    def stage_sic_fractions(self) -> dict[str, Fraction]:
        """Per stage, the exact share of SIC multiplies spent in the
        intra-channel convolution part (vs. the projection)."""
        out: dict[str, Fraction] = {}
        intra: dict[str, int] = {}
        total: dict[str, int] = {}
        for l in self.per_layer:
            if l.scheme == "sic" and "intra" in l.breakdown:
                intra[l.stage] = intra.get(l.stage, 0) + l.breakdown["intra"]
                total[l.stage] = total.get(l.stage, 0) + l.mults
        for stage in intra:
            out[stage] = Fraction(intra[stage], total[stage])
        return out


def count_layer(p: LayerPlacement) -> LayerCount:
    """Multiplies and learnable parameter count of one placed layer."""
    s = p.spec.scheme
    h, w = p.out_hw
    hin, win = p.in_hw
    k = p.spec.kernel_size or 1
    n_in, n_out = p.in_channels, p.out_channels
    breakdown: dict[str, int] = {}
    bn_params = 2 * n_out  # learnable scale and shift

    if s == "standard":
        mults = mults_standard(h, w, n_in, n_out, k)
        params = n_in * n_out * k * k + bn_params
    elif s == "project1x1":
        mults = mults_projection(h, w, n_in, n_out)
        params = n_in * n_out + bn_params
    elif s == "unraveled":
        b = p.spec.filters_per_channel
        mults = mults_unraveled(h, w, n_out, k, b)
        breakdown = {"intra": b * n_out * k * k * h * w, "projection": b * n_out * n_out * h * w}
        params = n_out * b * k * k + b * n_out * n_out + bn_params
    elif s == "sic":
        reps = p.spec.iterations or 1
        if p.spec.topology is not None:
            intra = n_out * k * k * h * w
            proj = mults_topo(h, w, p.spec.topology, 1)
            proj_params = n_out * p.spec.topology.neighbor_count
        else:
            intra, proj = mults_sic(h, w, n_out, k)
            proj_params = n_out * n_out
        mults = reps * (intra + proj)
        breakdown = {"intra": reps * intra, "projection": reps * proj}
        params = reps * (n_out * k * k + proj_params + bn_params)
    elif s == "topo":
        mults = mults_topo(h, w, p.spec.topology, k)
        params = n_out * p.spec.topology.neighbor_count * k * k + bn_params
    elif s == "grouped":
        mults = mults_grouped(h, w, n_in, n_out, k, p.spec.groups)
        params = (n_in // p.spec.groups) * n_out * k * k + bn_params
    elif s == "spatial_bottleneck":
        conv, proj, deconv = mults_spatial_bottleneck(hin, win, n_out, k)
        mults = conv + proj + deconv
        breakdown = {"conv": conv, "projection": proj, "deconv": deconv}
        params = 2 * n_out * k * k + n_out * n_out + bn_params
    elif s == "channel_bottleneck":
        parts = mults_channel_bottleneck(h, w, n_out, k)
        mults = sum(parts)
        breakdown = dict(zip(("reduce_conv", "reduce_projection", "expand_conv", "expand_projection"), parts))
        half = n_out // 2
        params = n_out * k * k + n_out * half + half * k * k + half * n_out + 2 * half + 2 * n_out
    elif s == "fully_connected":
        mults = mults_fully_connected(n_in, n_out)
        params = n_in * n_out + n_out  # bias
    else:  # pooling, softmax: multiply-free
        mults, params = 0, 0

    core = s in CORE_SCHEMES and p.in_channels == p.out_channels
    return LayerCount(p.layer_id, s, p.stage, mults, params, breakdown, core=core)


def model_report(
    spec: ModelSpec,
    input_hw: tuple[int, int] | None = None,
    baseline: ModelSpec | None = None,
) -> ComplexityReport:
    """Count every layer of a model and, if a baseline is given, form exact
    per-stage and overall core-multiply ratios against it."""
    layers = [count_layer(p) for p in walk(spec, input_hw)]
    hw = input_hw or (spec.input_resolution, spec.input_resolution)

    def core_by_stage(counts):
        out: dict[str, int] = {}
        for l in counts:
            if l.core:
                out[l.stage] = out.get(l.stage, 0) + l.mults
        return out

    stage_core = core_by_stage(layers)
    stage_ratios: dict[str, Fraction] = {}
    overall = None
    if baseline is not None:
        base_layers = [count_layer(p) for p in walk(baseline, input_hw)]
        base_core = core_by_stage(base_layers)
        for stage, m in stage_core.items():
            if stage in base_core and base_core[stage] > 0:
                stage_ratios[stage] = Fraction(m, base_core[stage])
        num = sum(m for st, m in stage_core.items() if st in base_core)
        den = sum(m for st, m in base_core.items() if st in stage_core)
        if den:
            overall = Fraction(num, den)
    return ComplexityReport(
        model=spec.name,
        input_hw=hw,
        baseline=baseline.name if baseline else None,
        per_layer=layers,
        stage_core_mults=stage_core,
        stage_ratios=stage_ratios,
        overall_ratio=overall,
        nominal_complexity=spec.metadata.get("nominal_complexity"),
    )
