"""Command-line interface.

Verbs: list-models, describe, complexity, gradcheck, train, eval. Exit codes:
0 on success, 1 on a domain error (unknown model, malformed spec file,
mismatched checkpoint), 2 on a usage error. `--format json` switches every
verb's stdout to a single JSON document carrying the same numbers as the text
rendering. Report paths given `--output DIR` write delimited files (CSV,
JSON) and PNG figures side by side.
"""

from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path

from . import __version__
from .complexity import model_report
from .data import load_dataset, synthetic_blobs
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .gradcheck import LAYER_REGISTRY, gradcheck_model, gradcheck_op
from .models import builtin_specs, get_spec, save_spec, spec_to_dict, walk
from .network import build_model
from .train import TrainConfig, evaluate, train


def _parse_input(text: str | None, default: int | None = None):
    if text is None:
        return None if default is None else (default, default)
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        dims = []
    if len(dims) == 1:
        return dims[0], dims[0]
    if len(dims) == 2:
        return dims[0], dims[1]
    print(f"error: --input must look like 221x221, got {text!r}", file=sys.stderr)
    raise SystemExit(2)


def _emit(args, payload: dict, text: str) -> None:
    if args.format == "json":
        print(json.dumps(payload, indent=2))
    else:
        print(text)


def _cmd_list_models(args) -> int:
    specs = builtin_specs()
    rows = []
    for name in sorted(specs):
        spec = specs[name]
        rows.append(
            {
                "name": name,
                "description": spec.description,
                "input": spec.input_resolution,
                "classes": spec.num_classes,
                **{k: v for k, v in spec.metadata.items()},
            }
        )
    width = max(len(r["name"]) for r in rows)
    lines = []
    for r in rows:
        extras = []
        if "nominal_complexity" in r:
            extras.append(f"nominal ~{r['nominal_complexity']}")
        if "reported_top1_err" in r:
            extras.append(f"reported top-1 {r['reported_top1_err']}%")
        suffix = f"  [{', '.join(extras)}]" if extras else ""
        lines.append(f"{r['name']:<{width}s}  {r['description']}{suffix}")
    _emit(args, {"models": rows}, "\n".join(lines))
    return 0


def _cmd_describe(args) -> int:
    spec = get_spec(args.model)
    hw = _parse_input(args.input)
    placements = walk(spec, hw)
    rows = [
        {
            "layer": p.layer_id,
            "stage": p.stage,
            "in_channels": p.in_channels,
            "out_channels": p.out_channels,
            "in_hw": list(p.in_hw),
            "out_hw": list(p.out_hw),
        }
        for p in placements
    ]
    lines = [f"model {spec.name}: {spec.description}"]
    lines.append(f"input: {spec.input_channels}x{hw[0] if hw else spec.input_resolution}"
                 f"x{hw[1] if hw else spec.input_resolution}, classes: {spec.num_classes}")
    header = f"{'layer':28s} {'in':>12s} {'out':>12s}"
    lines += [header, "-" * len(header)]
    for p in placements:
        fin = f"{p.in_channels}@{p.in_hw[0]}x{p.in_hw[1]}"
        fout = f"{p.out_channels}@{p.out_hw[0]}x{p.out_hw[1]}"
        lines.append(f"{p.layer_id:28s} {fin:>12s} {fout:>12s}")
    payload = {"model": spec.name, "description": spec.description, "layers": rows,
               "spec": spec_to_dict(spec)}
    _emit(args, payload, "\n".join(lines))
    if args.save_spec:
        save_spec(spec, args.save_spec)
    return 0


def _infer_baseline(name: str) -> str:
    return "A-tiny" if name.endswith("-tiny") else "A"


def _cmd_complexity(args) -> int:
    from .report import (
        figure_ratio_comparison,
        figure_stage_mults,
        render_text,
        report_to_dict,
        write_report_csv,
        write_report_json,
    )

    models = args.model or ["A"]
    specs = [get_spec(m) for m in models]
    hw = _parse_input(args.input)

    if args.compare and len(specs) < 2:
        print("--compare needs at least two --model arguments", file=sys.stderr)
        return 2
    baseline_name = args.baseline
    if args.compare:
        baseline_name = specs[0].name
    reports = []
    for spec in specs:
        base = get_spec(baseline_name or _infer_baseline(spec.name))
        reports.append(model_report(spec, hw, baseline=base))

    texts = [render_text(r) for r in reports]
    if args.compare:
        lines = ["", f"comparison vs {baseline_name}:"]
        for r in reports[1:]:
            note = f"  (nominal ~{r.nominal_complexity})" if r.nominal_complexity else ""
            lines.append(
                f"  {r.model}: overall {float(r.overall_ratio):.4f} "
                f"({r.overall_ratio.numerator}/{r.overall_ratio.denominator}){note}"
            )
        texts.append("\n".join(lines))
    payload = {"reports": [report_to_dict(r) for r in reports]}
    _emit(args, payload, "\n\n".join(texts))

    if args.output:
        outdir = Path(args.output)
        outdir.mkdir(parents=True, exist_ok=True)
        for r in reports:
            write_report_json(report_to_dict(r), outdir / f"complexity_{r.model}.json")
            write_report_csv(r, outdir / f"complexity_{r.model}.csv")
        figure_stage_mults(reports, outdir / "stage_mults.png")
        if all(r.overall_ratio is not None for r in reports):
            figure_ratio_comparison(reports, outdir / "ratio_comparison.png")
    return 0


def _cmd_gradcheck(args) -> int:
    if bool(args.layer) == bool(args.model):
        print("gradcheck needs exactly one of --layer or --model", file=sys.stderr)
        return 2
    if args.layer:
        result = gradcheck_op(
            args.layer,
            seed=args.seed,
            instances=args.instances,
            step=args.step,
            tolerance=args.tolerance,
            channels=args.n,
            kernel_size=args.k,
            iterations=args.b,
            spatial=args.spatial,
            batch=args.batch,
        )
    else:
        spec = get_spec(args.model)
        net = build_model(spec, seed=args.seed, precision="double")
        hw = _parse_input(args.input, default=spec.input_resolution)
        result = gradcheck_model(
            net, hw, spec.input_channels,
            seed=args.seed, step=args.step,
            tolerance=args.tolerance if args.tolerance != 1e-6 else 1e-3,
        )
    verdict = "PASS" if result.passed else "FAIL"
    text = (
        f"{result.layer}: max rel err {result.max_rel_err:.3e} over "
        f"{result.entries_checked} entries ({result.instances} instance(s)) "
        f"< {result.tolerance:g}: {verdict}"
    )
    payload = {
        "layer": result.layer,
        "max_rel_err": result.max_rel_err,
        "tolerance": result.tolerance,
        "entries_checked": result.entries_checked,
        "instances": result.instances,
        "passed": result.passed,
        "per_array": result.details,
    }
    _emit(args, payload, text)
    return 0 if result.passed else 1


def _load_or_generate(args, spec, split="train"):
    if args.data:
        return load_dataset(args.data, num_classes=spec.num_classes, split=split)
    return synthetic_blobs(
        samples=args.samples,
        classes=spec.num_classes,
        resolution=spec.input_resolution,
        channels=spec.input_channels,
        seed=args.data_seed,
        split=split,
    )


def _cmd_train(args) -> int:
    from .report import figure_training_curves

    spec = get_spec(args.model)
    dataset = _load_or_generate(args, spec)
    net = build_model(spec, seed=args.seed, precision=args.precision)
    config = TrainConfig(
        lr=args.lr,
        lr_decay_every=args.lr_decay_every,
        momentum=args.momentum,
        batch_size=args.batch,
        epochs=args.epochs,
        seed=args.seed,
        precision=args.precision,
        stop_at_accuracy=args.stop_at_accuracy,
        min_epochs=args.min_epochs,
    )
    outdir = Path(args.output) if args.output else None
    ckpt_dir = metrics_path = None
    if outdir:
        outdir.mkdir(parents=True, exist_ok=True)
        ckpt_dir = outdir / "checkpoints"
        metrics_path = outdir / "metrics.csv"
    result = train(
        net, dataset, config,
        checkpoint_dir=ckpt_dir, metrics_path=metrics_path,
        verbose=args.format == "text",
    )
    summary = {
        "model": spec.name,
        "epochs_run": result.state.epoch,
        "final_train_accuracy": result.final_train_accuracy,
        "train_losses": result.train_losses,
        "seconds": result.seconds,
    }
    if outdir:
        save_checkpoint(outdir / "final.ckpt", net, extra={"epochs": result.state.epoch})
        figure_training_curves(result.history, outdir / "training_curves.png", title=spec.name)
        summary["output"] = str(outdir)
    _emit(
        args, summary,
        f"trained {spec.name} for {result.state.epoch} epoch(s): "
        f"train accuracy {result.final_train_accuracy:.4f} in {result.seconds:.1f}s"
        + (f"; artifacts in {outdir}" if outdir else ""),
    )
    return 0


def _cmd_eval(args) -> int:
    spec = get_spec(args.model)
    net = build_model(spec, seed=args.seed, precision=args.precision)
    if args.checkpoint:
        load_checkpoint(args.checkpoint, net)
    dataset = _load_or_generate(args, spec, split="eval")
    top1, top5, loss = evaluate(net, dataset, batch_size=args.batch)
    payload = {"model": spec.name, "top1_error": top1, "top5_error": top5, "loss": loss,
               "samples": len(dataset)}
    _emit(
        args, payload,
        f"{spec.name}: top-1 error {top1:.4f}, top-5 error {top5:.4f}, loss {loss:.4f} "
        f"({len(dataset)} samples)",
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sicnet",
        description="Efficient convolutional layer designs: models, complexity reports, "
        "gradient checks and desk-scale training.",
    )
    parser.add_argument("--version", action="version", version=f"sicnet {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--format", choices=("text", "json"), default="text")

    p = sub.add_parser("list-models", help="print builtin model specs")
    common(p)

    p = sub.add_parser("describe", help="show a model's layer stack and shapes")
    p.add_argument("--model", required=True, help="builtin name or spec JSON path")
    p.add_argument("--input", help="input resolution HxW (default: the spec's)")
    p.add_argument("--save-spec", help="also write the spec as JSON to this path")
    common(p)

    p = sub.add_parser("complexity", help="multiplication counts and ratios")
    p.add_argument("--model", action="append", help="model (repeatable)")
    p.add_argument("--input", help="input resolution HxW, e.g. 221x221")
    p.add_argument("--baseline", help="ratio baseline (default: A, or A-tiny for tiny models)")
    p.add_argument("--compare", action="store_true",
                   help="treat the first --model as the baseline and compare the rest")
    p.add_argument("--output", help="directory for CSV/JSON reports and PNG figures")
    common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--layer", choices=sorted(LAYER_REGISTRY), help="layer type to check")
    p.add_argument("--model", help="whole-model spot check instead of a layer")
    p.add_argument("--n", type=int, default=4, help="channel count")
    p.add_argument("--k", type=int, default=3, help="kernel size")
    p.add_argument("--b", type=int, default=2, help="SIC iterations")
    p.add_argument("--spatial", type=int, default=5)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--instances", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--input", help="input resolution for --model mode")
    common(p)

    p = sub.add_parser("train", help="train a model on the synthetic or a binary dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--lr-decay-every", type=int, default=8)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("single", "double"), default="single")
    p.add_argument("--data", help="dataset directory (images.t4 + labels.u32)")
    p.add_argument("--samples", type=int, default=5000, help="synthetic sample count")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--stop-at-accuracy", type=float, default=None)
    p.add_argument("--min-epochs", type=int, default=1)
    p.add_argument("--output", help="directory for metrics.csv, checkpoints and figures")
    common(p)

    p = sub.add_parser("eval", help="evaluate a (checkpointed) model")
    p.add_argument("--model", required=True)
    p.add_argument("--checkpoint", help="checkpoint file to load")
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("single", "double"), default="single")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--data-seed", type=int, default=1)
    common(p)
    return parser


_HANDLERS = {
    "list-models": _cmd_list_models,
    "describe": _cmd_describe,
    "complexity": _cmd_complexity,
    "gradcheck": _cmd_gradcheck,
    "train": _cmd_train,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.verb](args)
    except (KeyError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
