"""Report rendering: aligned text, JSON, CSV, and matplotlib figures.

Every machine-readable multiply count and ratio comes straight from the
`ComplexityReport` integers/rationals; rendering never rounds before ratio
computation. When an output directory is given, report paths write the
delimited files and a PNG figure side by side.
"""

from __future__ import annotations

import csv
import json
from fractions import Fraction
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .complexity import ComplexityReport
from .train import EpochMetrics

_STAGE_ORDER = {"1": 1, "2": 2, "3": 3, "4": 4, "head": 9}


def _fraction_fields(f: Fraction | None) -> dict:
    if f is None:
        return {}
    return {"ratio_num": f.numerator, "ratio_den": f.denominator, "ratio": float(f)}


def report_rows(report: ComplexityReport) -> list[dict]:
    """One flat dict per layer: layer, scheme, stage, mults, params plus the
    stage ratio fields (repeated on every layer of the stage)."""
    rows = []
    for layer in report.per_layer:
        row = {
            "layer": layer.layer_id,
            "scheme": layer.scheme,
            "stage": layer.stage,
            "core": layer.core,
            "mults": layer.mults,
            "params": layer.params,
        }
        row.update(_fraction_fields(report.stage_ratios.get(layer.stage)))
        rows.append(row)
    return rows


def report_to_dict(report: ComplexityReport) -> dict:
    out = {
        "model": report.model,
        "input": list(report.input_hw),
        "baseline": report.baseline,
        "total_mults": report.total_mults,
        "total_params": report.total_params,
        "core_mults": report.core_mults,
        "nominal_complexity": report.nominal_complexity,
        "layers": report_rows(report),
        "stage_core_mults": dict(report.stage_core_mults),
        "stage_ratios": {
            s: _fraction_fields(f) for s, f in sorted(report.stage_ratios.items())
        },
        "sic_intra_fractions": {
            s: {"num": f.numerator, "den": f.denominator, "percent": float(f) * 100}
            for s, f in sorted(report.stage_sic_fractions().items())
        },
    }
    out.update({"overall_" + k: v for k, v in _fraction_fields(report.overall_ratio).items()})
    return out


def render_text(report: ComplexityReport) -> str:
    lines = []
    hw = f"{report.input_hw[0]}x{report.input_hw[1]}"
    lines.append(f"model {report.model}  (input {hw})")
    header = f"{'layer':28s} {'stage':>5s} {'mults':>15s} {'params':>12s}"
    lines.append(header)
    lines.append("-" * len(header))
    for l in report.per_layer:
        mark = "*" if l.core else " "
        lines.append(f"{l.layer_id:28s} {l.stage:>5s} {l.mults:>15,d} {l.params:>12,d} {mark}")
    lines.append("-" * len(header))
    lines.append(f"{'total':28s} {'':>5s} {report.total_mults:>15,d} {report.total_params:>12,d}")
    lines.append(f"core (interchangeable, *) multiplies: {report.core_mults:,}")

    fractions = report.stage_sic_fractions()
    if fractions:
        lines.append("SIC intra-channel share of stage multiplies:")
        for s, f in sorted(fractions.items()):
            lines.append(f"  stage {s}: {float(f) * 100:.1f}%  ({f.numerator}/{f.denominator})")

    if report.baseline:
        lines.append(f"core-multiply ratios vs baseline {report.baseline}:")
        for s, f in sorted(report.stage_ratios.items(), key=lambda kv: _STAGE_ORDER.get(kv[0], 8)):
            lines.append(f"  stage {s}: {float(f):.4f}  ({f.numerator}/{f.denominator})")
        if report.overall_ratio is not None:
            note = f"  (nominal ~{report.nominal_complexity})" if report.nominal_complexity else ""
            lines.append(f"  overall: {float(report.overall_ratio):.4f}{note}")
    return "\n".join(lines)


def write_report_csv(report: ComplexityReport, path) -> None:
    rows = report_rows(report)
    fields = ["layer", "scheme", "stage", "core", "mults", "params", "ratio_num", "ratio_den", "ratio"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})


def write_report_json(data, path) -> None:
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


# -- figures -------------------------------------------------------------


def figure_stage_mults(reports: list[ComplexityReport], path) -> None:
    """Grouped bars: core multiplies per stage for one or more models."""
    stages = sorted(
        {s for r in reports for s in r.stage_core_mults}, key=lambda s: _STAGE_ORDER.get(s, 8)
    )
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(reports), 1)
    for i, r in enumerate(reports):
        xs = [j + i * width for j in range(len(stages))]
        ys = [r.stage_core_mults.get(s, 0) / 1e6 for s in stages]
        ax.bar(xs, ys, width=width, label=r.model)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(stages))])
    ax.set_xticklabels([f"stage {s}" for s in stages])
    ax.set_ylabel("core multiplies per image (millions)")
    ax.set_title("core multiply counts by stage")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def figure_ratio_comparison(reports: list[ComplexityReport], path) -> None:
    """Overall core-multiply ratio vs baseline, one bar per model, with the
    nominal design fraction marked when the model declares one."""
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [r.model for r in reports]
    ys = [float(r.overall_ratio) if r.overall_ratio is not None else 0.0 for r in reports]
    ax.bar(range(len(reports)), ys, color="tab:blue", label="measured")
    for i, r in enumerate(reports):
        if r.nominal_complexity:
            nominal = float(Fraction(r.nominal_complexity))
            ax.plot([i - 0.4, i + 0.4], [nominal, nominal], "r--", linewidth=1.2)
    ax.set_xticks(range(len(reports)))
    ax.set_xticklabels(names)
    ax.set_ylabel("core multiplies relative to baseline")
    ax.set_title("complexity vs baseline (dashed: nominal design ratio)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def figure_training_curves(history: list[EpochMetrics], path, title: str = "") -> None:
    """Loss and top-1 error per epoch, train and (if present) validation."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for split, style in (("train", "-o"), ("val", "--s")):
        rows = [m for m in history if m.split == split]
        if not rows:
            continue
        epochs = [m.epoch for m in rows]
        ax1.plot(epochs, [m.loss for m in rows], style, label=split, markersize=3)
        ax2.plot(epochs, [m.top1 for m in rows], style, label=split, markersize=3)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("top-1 error")
    for ax in (ax1, ax2):
        ax.legend()
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
