import json
from fractions import Fraction

import pytest

from sicnet.complexity import model_report
from sicnet.models import builtin_specs
from sicnet.report import (
    figure_ratio_comparison,
    figure_stage_mults,
    figure_training_curves,
    render_text,
    report_rows,
    report_to_dict,
    write_report_csv,
    write_report_json,
)
from sicnet.train import EpochMetrics


@pytest.fixture(scope="module")
def report():
    specs = builtin_specs()
    return model_report(specs["C"], baseline=specs["A"])


class TestRows:
    def test_row_fields(self, report):
        rows = report_rows(report)
        assert len(rows) == len(report.per_layer)
        first = rows[0]
        assert {"layer", "scheme", "stage", "mults", "params"} <= set(first)
        sic_rows = [r for r in rows if r["scheme"] == "sic"]
        assert all("ratio_num" in r and "ratio_den" in r for r in sic_rows)

    def test_ratios_not_prerounded(self, report):
        d = report_to_dict(report)
        r2 = d["stage_ratios"]["2"]
        assert Fraction(r2["ratio_num"], r2["ratio_den"]) == Fraction(137, 576)
        assert r2["ratio"] == 137 / 576

    def test_json_is_serializable_and_stable(self, report):
        a = json.dumps(report_to_dict(report), sort_keys=True)
        b = json.dumps(report_to_dict(report), sort_keys=True)
        assert a == b


class TestText:
    def test_text_carries_the_same_numbers(self, report):
        text = render_text(report)
        assert f"{report.total_mults:,}" in text
        assert "6.6%" in text
        assert "(137/576)" in text
        assert "nominal ~2/9" in text

    def test_zero_cost_lines_listed(self, report):
        text = render_text(report)
        assert "pool_max" in text and "softmax" in text


class TestFilesAndFigures:
    def test_csv_and_json(self, report, tmp_path):
        write_report_csv(report, tmp_path / "r.csv")
        write_report_json(report_to_dict(report), tmp_path / "r.json")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0].startswith("layer,scheme,stage,core,mults,params")
        assert len(lines) == len(report.per_layer) + 1
        parsed = json.loads((tmp_path / "r.json").read_text())
        assert parsed["model"] == "C"

    def test_figures_render(self, report, tmp_path):
        figure_stage_mults([report], tmp_path / "a.png")
        figure_ratio_comparison([report], tmp_path / "b.png")
        history = [
            EpochMetrics(0, "train", 1.0, 0.5, 0.1),
            EpochMetrics(1, "train", 0.5, 0.2, 0.05),
            EpochMetrics(1, "val", 0.6, 0.3, 0.06),
        ]
        figure_training_curves(history, tmp_path / "c.png", title="demo")
        for name in ("a.png", "b.png", "c.png"):
            assert (tmp_path / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
