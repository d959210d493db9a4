import json
from pathlib import Path

import pytest

from incpl.cli import main


@pytest.fixture(scope="module")
def task_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_task")
    rc = main([
        "synth", "--classes", "6", "--per-class", "6", "--seed", "1",
        "--backend-config", _backend_config_file(out),
        "--out", str(out),
    ])
    assert rc == 0
    return out


def _backend_config_file(tmp: Path) -> str:
    path = tmp / "backend.cfg"
    path.write_text(
        "d_v = 8\nd_l = 8\nM = 4\nC_img = 3\nH = 8\nW = 8\n"
        "n_layers = 2\ntemperature = 20.0\nseed = 3\n"
    )
    return str(path)


def run_flags(task_dir, out_path, extra=()):
    return [
        "run",
        "--backend-config", str(task_dir / "backend.cfg"),
        "--dataset", str(task_dir),
        "--n-context", "3",
        "--out", str(out_path),
        *extra,
    ]


class TestRun:
    def test_run_produces_report(self, task_dir, tmp_path, capsys):
        out = tmp_path / "report.json"
        assert main(run_flags(task_dir, out)) == 0
        report = json.loads(out.read_text())
        assert report["total"] == 30
        assert report["weight_digest_before"] == report["weight_digest_after"]
        assert "accuracy=" in capsys.readouterr().out

    def test_identical_flags_identical_bytes(self, task_dir, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert main(run_flags(task_dir, a)) == 0
        assert main(run_flags(task_dir, b)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_cyclic_flags(self, task_dir, tmp_path):
        out = tmp_path / "cyc.json"
        rc = main(run_flags(task_dir, out, extra=["--mode", "cyclic", "--lambda", "0.4"]))
        assert rc == 0
        report = json.loads(out.read_text())
        assert report["samples"][0]["counters"]["vision_calls"] == 9  # (3+1)*2 + 1

    def test_step_log_json_lines(self, task_dir, tmp_path):
        out = tmp_path / "r.json"
        step_log = tmp_path / "steps.jsonl"
        assert main(run_flags(task_dir, out, extra=["--step-log", str(step_log)])) == 0
        lines = [json.loads(l) for l in step_log.read_text().splitlines()]
        assert len(lines) == 30  # one step per sample in visual-only mode
        assert set(lines[0]) == {"sample", "step", "entropy_term", "supervised_terms", "lambda", "total"}

    def test_theta_roundtrip(self, task_dir, tmp_path):
        first = tmp_path / "first.json"
        theta_file = tmp_path / "theta.txt"
        assert main(run_flags(task_dir, first, extra=["--theta-out", str(theta_file)])) == 0
        second = tmp_path / "second.json"
        rc = main(run_flags(task_dir, second, extra=["--theta-in", str(theta_file)]))
        assert rc == 0
        r1 = json.loads(first.read_text())
        r2 = json.loads(second.read_text())
        assert r2["theta_digest_before"] == r1["theta_digest_after"]


class TestConfigErrors:
    def test_oracle_without_ablation_is_exit_2(self, task_dir, tmp_path):
        rc = main(run_flags(task_dir, tmp_path / "r.json", extra=["--label-mode", "oracle"]))
        assert rc == 2

    def test_oracle_with_ablation_ok(self, task_dir, tmp_path):
        rc = main(run_flags(task_dir, tmp_path / "r.json",
                            extra=["--label-mode", "oracle", "--ablation"]))
        assert rc == 0

    def test_adapter_backend_is_programmatic_only(self, task_dir, tmp_path):
        rc = main(run_flags(task_dir, tmp_path / "r.json", extra=["--backend", "adapter"]))
        assert rc == 2

    def test_manifest_file_requires_labeled(self, task_dir, tmp_path):
        rc = main([
            "run",
            "--backend-config", str(task_dir / "backend.cfg"),
            "--dataset", str(task_dir / "test.jsonl"),
            "--out", str(tmp_path / "r.json"),
        ])
        assert rc == 2

    def test_bad_backend_config_key(self, task_dir, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("d_v = 8\nwarp_factor = 9\n")
        rc = main([
            "run", "--backend-config", str(bad),
            "--dataset", str(task_dir),
            "--out", str(tmp_path / "r.json"),
        ])
        assert rc == 2

    def test_missing_dataset(self, tmp_path):
        rc = main(["run", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "r.json")])
        assert rc == 2


class TestMatrixCommand:
    def test_small_matrix(self, task_dir, tmp_path, capsys):
        out = tmp_path / "cells"
        rc = main([
            "matrix",
            "--backend-config", str(task_dir / "backend.cfg"),
            "--dataset", str(task_dir),
            "--n-context", "3",
            "--axis", "n_context", "--values", "1,3",
            "--out", str(out),
        ])
        assert rc == 0
        assert (out / "summary.csv").exists()
        assert (out / "n_context=1.json").exists()
        assert "cells=2" in capsys.readouterr().out


class TestReportCommand:
    def test_summarize_to_csv(self, task_dir, tmp_path):
        report = tmp_path / "r.json"
        assert main(run_flags(task_dir, report)) == 0
        out = tmp_path / "summary.csv"
        rc = main(["report", str(report), "--format", "csv", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("cell,accuracy")
        assert len(lines) == 2

    def test_no_inputs(self, tmp_path):
        rc = main(["report", str(tmp_path), "--out", str(tmp_path / "s.csv")])
        assert rc == 2


class TestSynth:
    def test_synth_writes_manifests(self, task_dir):
        assert (task_dir / "labeled.jsonl").exists()
        assert (task_dir / "test.jsonl").exists()
        info = json.loads((task_dir / "task.json").read_text())
        assert 1 / 6 < info["zero_shot_accuracy"] < 1.0
