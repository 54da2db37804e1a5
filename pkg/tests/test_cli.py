"""CLI thin client: subcommands, config precedence, exit codes."""

import json

import pytest
from click.testing import CliRunner

from gradeopt.cli import main


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def task_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_task")
    runner = CliRunner()
    result = runner.invoke(
        main,
        [
            "synth-data",
            "--out-dir",
            str(root),
            "--items",
            "60",
            "--labels",
            "3",
            "--boundary-fraction",
            "0.3",
            "--experts-per-label",
            "1",
            "--seed",
            "9",
        ],
    )
    assert result.exit_code == 0, result.output
    return root


def common_args(task_dir, out_dir, **extra):
    args = [
        "--data-dir",
        str(task_dir),
        "--backend",
        "synthetic",
        "--rounds",
        "1",
        "--n-eval",
        "6",
        "--n-init",
        "2",
        "--k-min",
        "3",
        "--k-max",
        "5",
        "--candidate-count",
        "32",
        "--seed",
        "4",
        "--fan-out",
        "1",
        "--out-dir",
        str(out_dir),
    ]
    for key, value in extra.items():
        args += [key, str(value)]
    return args


def test_synth_data_writes_files(tmp_path, runner):
    result = runner.invoke(
        main, ["synth-data", "--out-dir", str(tmp_path / "d"), "--items", "50"]
    )
    assert result.exit_code == 0, result.output
    assert "30/10/10" in result.output
    assert (tmp_path / "d" / "train.jsonl").exists()


def test_optimize_and_report(tmp_path, task_dir, runner):
    out = tmp_path / "run"
    result = runner.invoke(main, ["optimize", *common_args(task_dir, out)])
    assert result.exit_code == 0, result.output
    assert "optimized" in result.output
    assert (out / "report.json").exists()

    rep = runner.invoke(
        main, ["report", str(out), "-o", str(tmp_path / "table.txt")]
    )
    assert rep.exit_code == 0, rep.output
    assert (tmp_path / "table.txt").read_text() == [
        line for line in [open(out / "report.txt").read()]
    ][0]


def test_baseline_command(tmp_path, task_dir, runner):
    result = runner.invoke(
        main,
        ["baseline", "random", *common_args(task_dir, tmp_path / "b"), "--baseline-k", "4"],
    )
    assert result.exit_code == 0, result.output
    assert "baseline_random" in result.output


def test_grade_command_and_schema_error_exit(tmp_path, task_dir, runner):
    out = tmp_path / "run_g"
    assert runner.invoke(main, ["optimize", *common_args(task_dir, out)]).exit_code == 0

    preds = tmp_path / "p.jsonl"
    ok = runner.invoke(
        main,
        [
            "grade",
            str(out / "exemplar_set.json"),
            str(task_dir / "test.jsonl"),
            "-o",
            str(preds),
            *common_args(task_dir, out),
        ],
    )
    assert ok.exit_code == 0, ok.output
    assert preds.exists()

    bad_input = tmp_path / "bad.jsonl"
    bad_input.write_text('{"id": "z"}\n')
    bad = runner.invoke(
        main,
        [
            "grade",
            str(out / "exemplar_set.json"),
            str(bad_input),
            "-o",
            str(tmp_path / "p2.jsonl"),
            *common_args(task_dir, out),
        ],
    )
    assert bad.exit_code == 1


def test_validation_error_exit_code(tmp_path, runner):
    result = runner.invoke(
        main,
        ["optimize", "--backend", "synthetic", "--out-dir", str(tmp_path / "x")],
    )
    assert result.exit_code == 1
    assert "error" in result.output.lower()


def test_config_file_with_flag_override(tmp_path, task_dir, runner):
    config_file = tmp_path / "config.json"
    config_file.write_text(
        json.dumps(
            {
                "train_path": str(task_dir / "train.jsonl"),
                "validation_path": str(task_dir / "validation.jsonl"),
                "test_path": str(task_dir / "test.jsonl"),
                "rubric_path": str(task_dir / "rubric.txt"),
                "instruction_path": str(task_dir / "instruction.txt"),
                "backend": "synthetic",
                "rounds": 3,
                "n_eval": 6,
                "n_init": 2,
                "k_min": 3,
                "k_max": 5,
                "seed": 4,
                "fan_out": 1,
            }
        )
    )
    out = tmp_path / "cfg_run"
    # flag overrides the file's rounds=3
    result = runner.invoke(
        main,
        [
            "optimize",
            "--config",
            str(config_file),
            "--rounds",
            "1",
            "--out-dir",
            str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["rounds"] == 1


def test_unknown_config_key_rejected(tmp_path, runner):
    config_file = tmp_path / "bad.json"
    config_file.write_text('{"rounds": 2, "bogus_key": 1}')
    result = runner.invoke(main, ["optimize", "--config", str(config_file)])
    assert result.exit_code == 1
    assert "bogus_key" in result.output
