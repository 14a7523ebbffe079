import csv
import subprocess
import sys

import pytest

from maskdistill.cli import COMMANDS, EXIT_CONFIG, EXIT_MISSING, EXIT_OK, dispatch, main


def cli(*args):
    return subprocess.run([sys.executable, "-m", "maskdistill.cli", *args], capture_output=True, text=True)


def test_help_lists_every_subcommand():
    proc = cli("--help")
    assert proc.returncode == 0
    for name in COMMANDS:
        assert name in proc.stdout
    assert len(COMMANDS) == 8


def test_unknown_command_prints_usage():
    proc = cli("frobnicate")
    assert proc.returncode != 0 and "usage" in proc.stderr


@pytest.fixture
def smoke(request, tmp_path):
    config = str(request.config.rootpath / "configs" / "smoke.yaml")
    return lambda command, *extra: dispatch([command, "--config", config, "--root", str(tmp_path), *extra])


def test_train_without_store_names_missing_stages(smoke):
    assert smoke("gen-tasks").exit_code == EXIT_OK
    result = smoke("train", "--mode", "progressive")
    assert result.exit_code == EXIT_CONFIG
    assert "stage0" in result.summary and "missing" in result.summary


def test_missing_inputs_and_bad_config(smoke):
    assert smoke("pretrain-teacher").exit_code == EXIT_MISSING
    assert smoke("gen-tasks", "--set", "rollout.mix.teacher=3").exit_code == EXIT_CONFIG


def test_full_pipeline_and_refusal(smoke, tmp_path, capsys):
    steps = [("gen-tasks",), ("pretrain-teacher",), ("mask",), ("pregenerate", "--workers", "2"), ("judge",)]
    steps += [("train", "--mode", m) for m in ("naive", "progressive", "masters")]
    steps += [("evaluate", "--mode", "masters"), ("report",)]
    for step in steps:
        result = smoke(*step)
        assert result.exit_code == EXIT_OK, (step, result.summary)
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["mode"] for r in rows] == ["naive", "progressive", "masters"]
    assert all(0.0 <= float(r["eval_accuracy"]) <= 1.0 for r in rows)
    assert (tmp_path / "curves.csv").exists()
    assert (tmp_path / "teachers" / "large" / "ratio_0.10.ckpt").exists()
    for mode in ("naive", "progressive", "masters"):
        assert (tmp_path / "runs" / mode / "metrics.csv").exists()

    store = (tmp_path / "store" / "records.jsonl").read_bytes()
    for step in (("gen-tasks",), ("pregenerate",), ("train", "--mode", "masters"), ("report",)):
        result = smoke(*step)
        assert result.exit_code == EXIT_CONFIG and "--force" in result.summary
    assert (tmp_path / "store" / "records.jsonl").read_bytes() == store
    assert smoke("report", "--force").exit_code == EXIT_OK

    assert main(["evaluate", "--config", str(tmp_path.parent / "nope.yaml")]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err
