import json

import numpy as np
import pytest

from sicnet.cli import main
from sicnet.data import save_dataset, synthetic_blobs
from sicnet.models import builtin_specs, save_spec


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestListModels:
    def test_lists_every_builtin(self, capsys):
        code, out, _ = run_cli(capsys, "list-models")
        assert code == 0
        for letter in "ABCDEFGHIJK":
            assert f"\n{letter} " in out or out.startswith(f"{letter} ")
            assert f"{letter}-tiny" in out

    def test_json_mode(self, capsys):
        code, out, _ = run_cli(capsys, "list-models", "--format", "json")
        assert code == 0
        names = {m["name"] for m in json.loads(out)["models"]}
        assert {"A", "K-tiny", "CB"} <= names


class TestDescribe:
    def test_text(self, capsys):
        code, out, _ = run_cli(capsys, "describe", "--model", "C")
        assert code == 0
        assert "sic" in out and "pool_max" in out

    def test_spec_file_roundtrip(self, capsys, tmp_path):
        path = tmp_path / "c.json"
        code, _, _ = run_cli(capsys, "describe", "--model", "C-tiny", "--save-spec", str(path))
        assert code == 0 and path.exists()
        code, out, _ = run_cli(capsys, "describe", "--model", str(path))
        assert code == 0 and "C-tiny" in out

    def test_unknown_model_is_domain_error(self, capsys):
        code, _, err = run_cli(capsys, "describe", "--model", "ZZ")
        assert code == 1
        assert "unknown model" in err

    def test_usage_error_exit_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["describe"])  # missing --model
        assert exc.value.code == 2


class TestComplexity:
    def test_model_c_stage_fractions_in_text(self, capsys):
        code, out, _ = run_cli(capsys, "complexity", "--model", "C", "--input", "221x221")
        assert code == 0
        assert "6.6%" in out and "3.4%" in out and "1.7%" in out

    def test_compare_annotates_nominal(self, capsys):
        code, out, _ = run_cli(capsys, "complexity", "--model", "A", "--model", "C", "--compare")
        assert code == 0
        assert "0.2325" in out
        assert "nominal ~2/9" in out

    def test_compare_needs_two_models(self, capsys):
        code, _, err = run_cli(capsys, "complexity", "--model", "A", "--compare")
        assert code == 2

    def test_text_and_json_agree(self, capsys):
        code, out_json, _ = run_cli(capsys, "complexity", "--model", "C", "--format", "json")
        assert code == 0
        report = json.loads(out_json)["reports"][0]
        code, out_text, _ = run_cli(capsys, "complexity", "--model", "C")
        assert code == 0
        assert f"{report['total_mults']:,}" in out_text
        ratio = report["stage_ratios"]["2"]
        assert f"({ratio['ratio_num']}/{ratio['ratio_den']})" in out_text

    def test_output_artifacts(self, capsys, tmp_path):
        outdir = tmp_path / "reports"
        code, _, _ = run_cli(
            capsys, "complexity", "--model", "A", "--model", "K", "--compare",
            "--output", str(outdir),
        )
        assert code == 0
        names = {p.name for p in outdir.iterdir()}
        assert {
            "complexity_A.json", "complexity_A.csv",
            "complexity_K.json", "complexity_K.csv",
            "stage_mults.png", "ratio_comparison.png",
        } <= names
        rows = (outdir / "complexity_K.csv").read_text().splitlines()
        assert rows[0] == "layer,scheme,stage,core,mults,params,ratio_num,ratio_den,ratio"
        data = json.loads((outdir / "complexity_K.json").read_text())
        assert data["model"] == "K"
        # figures are non-trivial PNG files
        assert (outdir / "stage_mults.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


class TestGradcheckVerb:
    def test_layer_pass_line(self, capsys):
        code, out, _ = run_cli(capsys, "gradcheck", "--layer", "sic", "--n", "4", "--k", "3", "--b", "2")
        assert code == 0
        assert "PASS" in out and "max rel err" in out

    def test_json_payload(self, capsys):
        code, out, _ = run_cli(capsys, "gradcheck", "--layer", "projection", "--format", "json")
        assert code == 0
        payload = json.loads(out)
        assert payload["passed"] is True
        assert payload["max_rel_err"] < payload["tolerance"]

    def test_needs_layer_or_model(self, capsys):
        code, _, err = run_cli(capsys, "gradcheck")
        assert code == 2


class TestTrainEval:
    def test_train_writes_artifacts_and_eval_loads(self, capsys, tmp_path):
        outdir = tmp_path / "run"
        code, out, _ = run_cli(
            capsys, "train", "--model", "C-tiny", "--epochs", "1", "--samples", "300",
            "--batch", "50", "--seed", "0", "--output", str(outdir),
        )
        assert code == 0
        assert (outdir / "metrics.csv").exists()
        assert (outdir / "final.ckpt").exists()
        assert (outdir / "training_curves.png").read_bytes()[:4] == b"\x89PNG"
        assert (outdir / "checkpoints" / "epoch_0000.ckpt").exists()

        code, out, _ = run_cli(
            capsys, "eval", "--model", "C-tiny", "--checkpoint", str(outdir / "final.ckpt"),
            "--samples", "200", "--format", "json",
        )
        assert code == 0
        payload = json.loads(out)
        assert 0.0 <= payload["top5_error"] <= payload["top1_error"] <= 1.0

    def test_train_on_saved_dataset(self, capsys, tmp_path):
        ds = synthetic_blobs(samples=100, classes=10, seed=4)
        save_dataset(ds, tmp_path / "ds")
        code, out, _ = run_cli(
            capsys, "train", "--model", "A-tiny", "--epochs", "1", "--batch", "50",
            "--data", str(tmp_path / "ds"),
        )
        assert code == 0
        assert "trained A-tiny" in out

    def test_eval_checkpoint_model_mismatch(self, capsys, tmp_path):
        outdir = tmp_path / "run"
        run_cli(
            capsys, "train", "--model", "C-tiny", "--epochs", "1", "--samples", "100",
            "--batch", "50", "--output", str(outdir),
        )
        code, _, err = run_cli(
            capsys, "eval", "--model", "A-tiny", "--checkpoint", str(outdir / "final.ckpt"),
            "--samples", "100",
        )
        assert code == 1
        assert "mismatch" in err


class TestDeterminism:
    def test_gradcheck_numbers_repeat(self, capsys):
        outs = []
        for _ in range(2):
            code, out, _ = run_cli(
                capsys, "gradcheck", "--layer", "conv", "--seed", "11", "--format", "json"
            )
            assert code == 0
            outs.append(json.loads(out)["max_rel_err"])
        assert outs[0] == outs[1]

    def test_complexity_json_repeats(self, capsys):
        outs = []
        for _ in range(2):
            code, out, _ = run_cli(capsys, "complexity", "--model", "G", "--format", "json")
            outs.append(out)
        assert outs[0] == outs[1]
