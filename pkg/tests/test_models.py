import numpy as np
import pytest

from sicnet.models import (
    LayerSpec,
    ModelSpec,
    StageSpec,
    builtin_specs,
    get_spec,
    load_spec,
    save_spec,
    spec_from_dict,
    spec_to_dict,
    walk,
)
from sicnet.topology import TopologyConfig


@pytest.fixture(scope="module")
def specs():
    return builtin_specs()


class TestLayerSpec:
    def test_required_fields(self):
        with pytest.raises(ValueError):
            LayerSpec("sic")  # missing kernel_size/out_channels
        with pytest.raises(ValueError):
            LayerSpec("topo", kernel_size=3, out_channels=8)  # missing topology
        with pytest.raises(ValueError):
            LayerSpec("nonsense")

    def test_effective_pad_defaults(self):
        assert LayerSpec("standard", kernel_size=3, out_channels=4).effective_pad == 1
        assert LayerSpec("standard", kernel_size=7, out_channels=4, stride=2).effective_pad == 0
        assert LayerSpec("standard", kernel_size=7, out_channels=4, stride=2, pad=3).effective_pad == 3


class TestBuiltins:
    def test_all_models_present(self, specs):
        for letter in "ABCDEFGHIJK":
            assert letter in specs
            assert f"{letter}-tiny" in specs
        assert "CB" in specs and "CB-tiny" in specs

    def test_stage_structure_of_a(self, specs):
        placements = walk(specs["A"])
        stage2 = [p for p in placements if p.stage == "2"]
        schemes = [p.spec.scheme for p in stage2]
        assert schemes == ["pool_max", "project1x1", "standard", "standard"]
        assert all(p.out_channels == 128 for p in stage2[1:])
        assert stage2[-1].out_hw == (36, 36)

    def test_d_uses_5x5_sic(self, specs):
        placements = walk(specs["D"])
        sics = [p for p in placements if p.spec.scheme == "sic"]
        assert len(sics) == 12  # 4 per stage
        assert all(p.spec.kernel_size == 5 for p in sics)

    def test_f_topology_table(self, specs):
        placements = walk(specs["F"])
        by_stage = {p.stage: p.spec.topology for p in placements if p.spec.scheme == "topo"}
        assert by_stage["2"] == TopologyConfig((8, 16), (4, 8))
        assert by_stage["3"] == TopologyConfig((16, 16), (8, 8))
        assert by_stage["4"] == TopologyConfig((16, 32), (8, 16))

    def test_g_topology_table(self, specs):
        placements = walk(specs["G"])
        by_stage = {p.stage: p.spec.topology for p in placements if p.spec.scheme == "topo"}
        assert by_stage["2"] == TopologyConfig((4, 8, 4), (2, 5, 3))
        assert by_stage["3"] == TopologyConfig((8, 8, 4), (4, 5, 3))
        assert by_stage["4"] == TopologyConfig((8, 8, 8), (4, 5, 6))

    def test_i_is_sic_with_topology(self, specs):
        placements = walk(specs["I"])
        core = [p for p in placements if p.spec.scheme == "sic"]
        assert len(core) == 24  # 8 per stage
        assert all(p.spec.topology is not None for p in core)

    def test_k_alternates_padding(self, specs):
        placements = walk(specs["K"])
        sb = [p for p in placements if p.spec.scheme == "spatial_bottleneck" and p.stage == "2"]
        assert [p.spec.pad for p in sb] == [0, 1, 0, 1, 0, 1, 0, 1]
        assert all(p.spec.kernel_size == 2 for p in sb)

    def test_j_interleaves_sic_and_bottleneck(self, specs):
        placements = walk(specs["J"])
        stage2 = [p.spec.scheme for p in placements if p.stage == "2"][2:]  # drop pool, 1x1
        assert stage2 == [
            "spatial_bottleneck", "spatial_bottleneck", "sic",
            "spatial_bottleneck", "spatial_bottleneck", "sic",
        ]

    def test_full_resolution_chain(self, specs):
        placements = walk(specs["A"])
        resolutions = {p.stage: p.out_hw for p in placements}
        assert resolutions["1"] == (108, 108)
        assert resolutions["head"] == (1, 1)

    def test_tiny_resolution_chain(self, specs):
        placements = walk(specs["E-tiny"])
        stages = {p.stage: p.out_hw[0] for p in placements}
        assert (stages["1"], stages["2"], stages["3"], stages["4"]) == (16, 8, 4, 2)

    def test_metadata_reference_numbers(self, specs):
        assert specs["A"].metadata["reported_top1_err"] == 30.67
        assert specs["K"].metadata["nominal_complexity"] == "1/9"
        assert specs["E"].metadata["reported_top5_err"] == 9.88

    def test_incompatible_input_resolution_rejected(self, specs):
        with pytest.raises(ValueError):
            walk(specs["A"], (20, 20))  # pooling chain breaks the declared stage sizes


class TestWalkValidation:
    def test_channel_chain_mismatch(self):
        spec = ModelSpec(
            "bad", 3, 8,
            [StageSpec("1", [
                LayerSpec("project1x1", out_channels=4),
                LayerSpec("sic", kernel_size=3, out_channels=8),
            ])],
        )
        with pytest.raises(ValueError):
            walk(spec)

    def test_pool_window_exceeds_input(self):
        spec = ModelSpec(
            "bad", 1, 4,
            [StageSpec("1", [LayerSpec("pool_max", window=6, stride=6)])],
        )
        with pytest.raises(ValueError):
            walk(spec)

    def test_topology_channel_mismatch(self):
        spec = ModelSpec(
            "bad", 8, 8,
            [StageSpec("1", [
                LayerSpec("topo", kernel_size=3, out_channels=8,
                          topology=TopologyConfig((4,), (2,))),
            ])],
        )
        with pytest.raises(ValueError):
            walk(spec)


class TestSpecJson:
    def test_roundtrip_every_builtin(self, specs, tmp_path):
        for name, spec in specs.items():
            path = tmp_path / f"{name}.json"
            save_spec(spec, path)
            back = load_spec(path)
            assert spec_to_dict(back) == spec_to_dict(spec)
            assert [p.layer_id for p in walk(back)] == [p.layer_id for p in walk(spec)]

    def test_get_spec_by_path(self, specs, tmp_path):
        path = tmp_path / "custom.json"
        save_spec(specs["C-tiny"], path)
        assert get_spec(str(path)).name == "C-tiny"

    def test_unknown_model(self):
        with pytest.raises(KeyError):
            get_spec("Z")

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ValueError):
            load_spec(path)

    def test_unknown_layer_field_rejected(self):
        d = {
            "name": "x", "input_channels": 3, "input_resolution": 8,
            "stages": [{"name": "1", "layers": [{"scheme": "softmax", "bogus": 1}]}],
        }
        with pytest.raises(ValueError):
            spec_from_dict(d)

    def test_topology_json_form(self, specs):
        d = spec_to_dict(specs["F-tiny"])
        topo_layers = [
            l for st in d["stages"] for l in st["layers"] if l["scheme"] == "topo"
        ]
        assert topo_layers[0]["topology"] == {"dims": [4, 8], "neighborhood": [2, 4]}
