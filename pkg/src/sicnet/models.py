"""Declarative model descriptions and the built-in architecture zoo.

A `ModelSpec` lists stages of layer descriptions; the zoo contains eleven
reference classifiers (A through K) sharing one skeleton: a 7x7 stem, three
stages of shape-preserving core layers separated by max-pooling and 1x1
channel-doubling projections, then average pooling and a two-layer fully
connected head. They differ only in what fills the core slots:

    A  two 3x3 dense convolutions per stage (baseline)
    B  two unraveled convolutions, 4 filters per channel
    C  four SIC layers, 3x3
    D  four SIC layers, 5x5
    E  six SIC layers, 3x3
    F  four 2D-topology convolutions (quarter connectivity)
    G  four 3D-topology convolutions
    H  four grouped convolutions, 4 groups
    I  eight SIC layers with 2D-topology projections
    J  C with every other SIC replaced by a pad-0/pad-1 pair of spatial
       bottleneck layers (6 core layers)
    K  C with every SIC replaced the same way (8 core layers)

Each full-size spec takes 221x221x3 inputs and 1000 classes; every model also
has a "-tiny" desk variant (32x32x3 inputs, 10 classes, channels divided by 4)
with identical scheme structure, sized for CPU training experiments. "CB" is a
demonstration spec for the channel-wise bottleneck block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .topology import TopologyConfig

SCHEMES = (
    "standard",
    "unraveled",
    "sic",
    "topo",
    "grouped",
    "spatial_bottleneck",
    "channel_bottleneck",
    "pool_max",
    "pool_avg",
    "project1x1",
    "fully_connected",
    "softmax",
)

# Schemes that fill the interchangeable core slots; stage complexity ratios
# are measured over these layers only (stem, 1x1 transitions, pooling and the
# head are shared by every model and excluded).
CORE_SCHEMES = frozenset(
    {"standard", "unraveled", "sic", "topo", "grouped", "spatial_bottleneck", "channel_bottleneck"}
)


@dataclass
class LayerSpec:
    scheme: str
    kernel_size: int | None = None
    out_channels: int | None = None
    filters_per_channel: int | None = None  # unraveled b
    iterations: int | None = None  # SIC chain length inside one layer
    repeat: int = 1
    stride: int | None = None
    pad: int | None = None
    window: int | None = None
    groups: int | None = None
    topology: TopologyConfig | None = None
    out_features: int | None = None
    with_relu: bool = False
    dropout: float = 0.0

    _REQUIRED = {
        "standard": ("kernel_size", "out_channels"),
        "unraveled": ("kernel_size", "out_channels", "filters_per_channel"),
        "sic": ("kernel_size", "out_channels"),
        "topo": ("kernel_size", "out_channels", "topology"),
        "grouped": ("kernel_size", "out_channels", "groups"),
        "spatial_bottleneck": ("kernel_size", "out_channels", "pad"),
        "channel_bottleneck": ("kernel_size", "out_channels"),
        "pool_max": ("window", "stride"),
        "pool_avg": ("window", "stride"),
        "project1x1": ("out_channels",),
        "fully_connected": ("out_features",),
        "softmax": (),
    }

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        for name in self._REQUIRED[self.scheme]:
            if getattr(self, name) is None:
                raise ValueError(f"scheme {self.scheme!r} requires field {name!r}")
        if self.repeat < 1:
            raise ValueError("repeat must be >= 1")

    @property
    def effective_pad(self) -> int:
        """Explicit padding if given, else same-size padding for stride-1
        convolutions and none for strided ones."""
        if self.pad is not None:
            return self.pad
        if self.scheme in ("pool_max", "pool_avg"):
            return 0
        k = self.kernel_size or 1
        return (k - 1) // 2 if (self.stride or 1) == 1 else 0


@dataclass
class StageSpec:
    name: str
    layers: list[LayerSpec]
    resolution: int | None = None  # expected output side length, checked in walk


@dataclass
class ModelSpec:
    name: str
    input_channels: int
    input_resolution: int
    stages: list[StageSpec]
    description: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        for stage in reversed(self.stages):
            for layer in reversed(stage.layers):
                if layer.scheme == "fully_connected":
                    return layer.out_features
        raise ValueError(f"model {self.name!r} has no fully connected layer")


@dataclass
class LayerPlacement:
    """One concrete layer instance produced by walking a spec."""

    stage: str
    index: int  # position in the flattened layer list
    spec: LayerSpec
    in_channels: int
    out_channels: int
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]

    @property
    def layer_id(self) -> str:
        return f"{self.index:02d}.{self.stage}.{self.spec.scheme}"


def _pool_out(h: int, window: int, stride: int) -> int:
    if window > h:
        raise ValueError(f"pooling window {window} larger than input extent {h}")
    return (h - window) // stride + 1


def walk(spec: ModelSpec, input_hw: tuple[int, int] | None = None) -> list[LayerPlacement]:
    """Flatten a spec into per-layer placements with propagated shapes,
    validating channel chaining and declared stage resolutions."""
    h = w = spec.input_resolution
    if input_hw is not None:
        h, w = input_hw
    channels = spec.input_channels
    flat = False  # becomes true after the first fully connected layer
    placements: list[LayerPlacement] = []
    index = 0
    for stage in spec.stages:
        for layer in stage.layers:
            for _ in range(layer.repeat):
                cin, hw_in = channels, (h, w)
                s = layer.scheme
                if s in ("pool_max", "pool_avg"):
                    h = _pool_out(h, layer.window, layer.stride)
                    w = _pool_out(w, layer.window, layer.stride)
                elif s == "standard":
                    stride = layer.stride or 1
                    p = layer.effective_pad
                    k = layer.kernel_size
                    if h + 2 * p < k or w + 2 * p < k:
                        raise ValueError(f"kernel {k} exceeds padded input {h + 2 * p}")
                    h = (h + 2 * p - k) // stride + 1
                    w = (w + 2 * p - k) // stride + 1
                    channels = layer.out_channels
                elif s == "project1x1":
                    channels = layer.out_channels
                elif s in CORE_SCHEMES:
                    if layer.out_channels != channels:
                        raise ValueError(
                            f"{s} layer in stage {stage.name} expects {layer.out_channels} "
                            f"channels but receives {channels}"
                        )
                    if s == "topo" and layer.topology.channels != channels:
                        raise ValueError(
                            f"topology grid {layer.topology.dims} does not cover {channels} channels"
                        )
                elif s == "fully_connected":
                    cin = channels * h * w if not flat else channels
                    channels = layer.out_features
                    h = w = 1
                    flat = True
                elif s == "softmax":
                    pass
                placements.append(
                    LayerPlacement(stage.name, index, layer, cin, channels, hw_in, (h, w))
                )
                index += 1
        if stage.resolution is not None and h != stage.resolution:
            raise ValueError(
                f"stage {stage.name} of {spec.name} produced resolution {h}, "
                f"expected {stage.resolution}"
            )
    return placements


# -- built-in zoo -------------------------------------------------------------


def _standard(k, n, repeat=1, stride=None, pad=None):
    return LayerSpec("standard", kernel_size=k, out_channels=n, repeat=repeat, stride=stride, pad=pad)


def _sic(k, n, repeat=1, topology=None):
    return LayerSpec("sic", kernel_size=k, out_channels=n, repeat=repeat, topology=topology)


def _sb_pair(n, repeat=1):
    """A spatial-bottleneck substitution: pad-0 layer then pad-1 layer."""
    pair = [
        LayerSpec("spatial_bottleneck", kernel_size=2, out_channels=n, pad=0),
        LayerSpec("spatial_bottleneck", kernel_size=2, out_channels=n, pad=1),
    ]
    return pair * repeat


# 2D / 3D channel-grid configurations per stage index (2, 3, 4).
_TOPO_2D_FULL = {
    2: TopologyConfig((8, 16), (4, 8)),
    3: TopologyConfig((16, 16), (8, 8)),
    4: TopologyConfig((16, 32), (8, 16)),
}
_TOPO_3D_FULL = {
    2: TopologyConfig((4, 8, 4), (2, 5, 3)),
    3: TopologyConfig((8, 8, 4), (4, 5, 3)),
    4: TopologyConfig((8, 8, 8), (4, 5, 6)),
}
_TOPO_2D_TINY = {
    2: TopologyConfig((4, 8), (2, 4)),
    3: TopologyConfig((8, 8), (4, 4)),
    4: TopologyConfig((8, 16), (4, 8)),
}
_TOPO_3D_TINY = {
    2: TopologyConfig((2, 4, 4), (1, 3, 3)),
    3: TopologyConfig((4, 4, 4), (2, 3, 3)),
    4: TopologyConfig((4, 8, 4), (2, 5, 3)),
}


def _core_layers(model: str, stage: int, n: int, tiny: bool) -> list[LayerSpec]:
    topo2d = _TOPO_2D_TINY if tiny else _TOPO_2D_FULL
    topo3d = _TOPO_3D_TINY if tiny else _TOPO_3D_FULL
    if model == "A":
        return [_standard(3, n, repeat=2)]
    if model == "B":
        return [LayerSpec("unraveled", kernel_size=3, out_channels=n, filters_per_channel=4, repeat=2)]
    if model == "C":
        return [_sic(3, n, repeat=4)]
    if model == "D":
        return [_sic(5, n, repeat=4)]
    if model == "E":
        return [_sic(3, n, repeat=6)]
    if model == "F":
        return [LayerSpec("topo", kernel_size=3, out_channels=n, topology=topo2d[stage], repeat=4)]
    if model == "G":
        return [LayerSpec("topo", kernel_size=3, out_channels=n, topology=topo3d[stage], repeat=4)]
    if model == "H":
        return [LayerSpec("grouped", kernel_size=3, out_channels=n, groups=4, repeat=4)]
    if model == "I":
        return [_sic(3, n, repeat=8, topology=topo2d[stage])]
    if model == "J":
        return _sb_pair(n) + [_sic(3, n)] + _sb_pair(n) + [_sic(3, n)]
    if model == "K":
        return _sb_pair(n, repeat=4)
    if model == "CB":
        return [LayerSpec("channel_bottleneck", kernel_size=3, out_channels=n, repeat=4)]
    raise KeyError(model)


def _skeleton(model: str, tiny: bool, description: str, metadata: dict) -> ModelSpec:
    if tiny:
        div, classes, fc_hidden = 4, 10, 512
        stem = _standard(7, 16, stride=2, pad=3)
        pools = {2: (2, 2), 3: (2, 2), 4: (2, 2)}
        resolutions = {1: 16, 2: 8, 3: 4, 4: 2}
        head_pool = (2, 2)
        input_resolution = 32
    else:
        div, classes, fc_hidden = 1, 1000, 2048
        stem = _standard(7, 64, stride=2, pad=0)
        pools = {2: (3, 3), 3: (2, 2), 4: (3, 3)}
        resolutions = {1: 108, 2: 36, 3: 18, 4: 6}
        head_pool = (6, 6)
        input_resolution = 221

    stage_channels = {2: 128 // div, 3: 256 // div, 4: 512 // div}
    stages = [StageSpec("1", [stem], resolution=resolutions[1])]
    for s in (2, 3, 4):
        n = stage_channels[s]
        layers = [
            LayerSpec("pool_max", window=pools[s][0], stride=pools[s][1]),
            LayerSpec("project1x1", out_channels=n),
        ]
        layers += _core_layers(model, s, n, tiny)
        if s == 4:
            layers.append(LayerSpec("project1x1", out_channels=1024 // div))
        stages.append(StageSpec(str(s), layers, resolution=resolutions[s]))
    stages.append(
        StageSpec(
            "head",
            [
                LayerSpec("pool_avg", window=head_pool[0], stride=head_pool[1]),
                LayerSpec("fully_connected", out_features=fc_hidden, with_relu=True, dropout=0.2),
                LayerSpec("fully_connected", out_features=classes),
                LayerSpec("softmax"),
            ],
            resolution=1,
        )
    )
    name = f"{model}-tiny" if tiny else model
    return ModelSpec(name, 3, input_resolution, stages, description=description, metadata=dict(metadata))


_ZOO = {
    "A": ("baseline: two 3x3 dense conv layers per stage", {"nominal_complexity": "1", "reported_top1_err": 30.67, "reported_top5_err": 11.24}),
    "B": ("unraveled conv, 4 filters per channel, 2 layers per stage", {"nominal_complexity": "4/9", "reported_top1_err": 30.69, "reported_top5_err": 11.27}),
    "C": ("four 3x3 SIC layers per stage", {"nominal_complexity": "2/9", "reported_top1_err": 29.78, "reported_top5_err": 10.78}),
    "D": ("four 5x5 SIC layers per stage", {"nominal_complexity": "2/9", "reported_top1_err": 29.23, "reported_top5_err": 10.48}),
    "E": ("six 3x3 SIC layers per stage", {"nominal_complexity": "1/3", "reported_top1_err": 28.83, "reported_top5_err": 9.88}),
    "F": ("four 2D-topology conv layers per stage, quarter connectivity", {"nominal_complexity": "1/2", "reported_top1_err": 30.53, "reported_top5_err": 11.28}),
    "G": ("four 3D-topology conv layers per stage", {"nominal_complexity": "15/32", "reported_top1_err": 30.69, "reported_top5_err": 11.38}),
    "H": ("four grouped conv layers per stage, 4 groups", {"nominal_complexity": "1/2", "reported_top1_err": 31.23, "reported_top5_err": 11.73}),
    "I": ("eight SIC layers with 2D-topology projections per stage", {"nominal_complexity": "1/9", "reported_top1_err": 30.78, "reported_top5_err": 11.29}),
    "J": ("C with every other SIC replaced by a spatial-bottleneck pair", {"nominal_complexity": "1/6", "reported_top1_err": 29.72, "reported_top5_err": 10.66}),
    "K": ("C with all SIC layers replaced by spatial-bottleneck pairs", {"nominal_complexity": "1/9", "reported_top1_err": 30.78, "reported_top5_err": 11.34}),
    "CB": ("demo: four channel-wise bottleneck blocks per stage", {}),
}


def builtin_specs() -> dict[str, ModelSpec]:
    """All built-in model specs, full-size and tiny desk variants."""
    specs: dict[str, ModelSpec] = {}
    for model, (desc, meta) in _ZOO.items():
        specs[model] = _skeleton(model, tiny=False, description=desc, metadata=meta)
        tiny_meta = {k: v for k, v in meta.items() if k == "nominal_complexity"}
        specs[f"{model}-tiny"] = _skeleton(
            model, tiny=True, description=f"desk-scale variant of {model}: {desc}", metadata=tiny_meta
        )
    return specs


def get_spec(name_or_path: str) -> ModelSpec:
    """Resolve a builtin spec name or load a spec JSON file."""
    specs = builtin_specs()
    if name_or_path in specs:
        return specs[name_or_path]
    path = Path(name_or_path)
    if path.exists():
        return load_spec(path)
    raise KeyError(
        f"unknown model {name_or_path!r}; builtins: {', '.join(sorted(specs))}"
    )


# -- JSON round trip -------------------------------------------------------------

_LAYER_FIELDS = (
    "scheme",
    "kernel_size",
    "out_channels",
    "filters_per_channel",
    "iterations",
    "repeat",
    "stride",
    "pad",
    "window",
    "groups",
    "out_features",
    "with_relu",
    "dropout",
)
_LAYER_DEFAULTS = {"repeat": 1, "with_relu": False, "dropout": 0.0}


def _layer_to_dict(layer: LayerSpec) -> dict:
    out = {}
    for name in _LAYER_FIELDS:
        v = getattr(layer, name)
        if v is None or v == _LAYER_DEFAULTS.get(name):
            continue
        out[name] = v
    if layer.topology is not None:
        out["topology"] = {
            "dims": list(layer.topology.dims),
            "neighborhood": list(layer.topology.neighborhood),
        }
    return out


def _layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    topo = d.pop("topology", None)
    unknown = set(d) - set(_LAYER_FIELDS)
    if unknown:
        raise ValueError(f"unknown layer spec fields: {sorted(unknown)}")
    if topo is not None:
        d["topology"] = TopologyConfig(tuple(topo["dims"]), tuple(topo["neighborhood"]))
    return LayerSpec(**d)


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "name": spec.name,
        "description": spec.description,
        "input_channels": spec.input_channels,
        "input_resolution": spec.input_resolution,
        "metadata": spec.metadata,
        "stages": [
            {
                "name": st.name,
                **({"resolution": st.resolution} if st.resolution is not None else {}),
                "layers": [_layer_to_dict(l) for l in st.layers],
            }
            for st in spec.stages
        ],
    }


def spec_from_dict(d: dict) -> ModelSpec:
    stages = [
        StageSpec(
            st["name"],
            [_layer_from_dict(l) for l in st["layers"]],
            resolution=st.get("resolution"),
        )
        for st in d["stages"]
    ]
    return ModelSpec(
        name=d["name"],
        input_channels=d["input_channels"],
        input_resolution=d["input_resolution"],
        stages=stages,
        description=d.get("description", ""),
        metadata=d.get("metadata", {}),
    )


def save_spec(spec: ModelSpec, path) -> None:
    Path(path).write_text(json.dumps(spec_to_dict(spec), indent=2) + "\n")


def load_spec(path) -> ModelSpec:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed model spec file {path}: {e}") from e
    return spec_from_dict(d)
