"""End-to-end pipelines: artifacts, resume parity, baselines, inference."""

import json
from pathlib import Path

import pytest

from gradeopt.config import load_config
from gradeopt.errors import ConfigError
from gradeopt.exemplars import read_jsonl
from gradeopt.runner import (
    merge_reports,
    run_baseline,
    run_grade,
    run_optimize,
)
from gradeopt.synthetic import SyntheticTaskConfig, generate_task, write_task_files


@pytest.fixture(scope="module")
def task_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("task")
    config = SyntheticTaskConfig(
        label_count=3, n_items=60, boundary_fraction=0.3, expert_per_label=2
    )
    dataset, task = generate_task(config, seed=77)
    write_task_files(dataset, task, root)
    return root


def small_config(task_dir, out_dir, **overrides):
    base = dict(
        train_path=str(task_dir / "train.jsonl"),
        validation_path=str(task_dir / "validation.jsonl"),
        test_path=str(task_dir / "test.jsonl"),
        rubric_path=str(task_dir / "rubric.txt"),
        instruction_path=str(task_dir / "instruction.txt"),
        backend="synthetic",
        rounds=2,
        n_eval=8,
        n_init=3,
        k_min=3,
        k_max=6,
        candidate_count=48,
        out_dir=str(out_dir),
        seed=11,
        fan_out=1,
    )
    base.update(overrides)
    return load_config(None, base)


def read_bytes(path: Path) -> bytes:
    return path.read_bytes()


def test_optimize_artifacts_and_budget(task_dir, tmp_path):
    config = small_config(task_dir, tmp_path / "run")
    report = run_optimize(config)
    out = tmp_path / "run"

    assert (out / "pool_round_0.jsonl").exists()
    assert (out / "pool_round_1.jsonl").exists()
    assert not (out / "pool_round_2.jsonl").exists()  # no generation after round T
    assert (out / "exemplar_set.json").exists()
    assert (out / "report.json").exists() and (out / "report.txt").exists()
    assert (out / "predictions_validation.jsonl").exists()
    assert (out / "predictions_test.jsonl").exists()
    assert (out / "rationale_audit.jsonl").exists()

    # round 1 has the forced expert anchor (6 experts within [3, 6]) -> +1
    obs1 = read_jsonl(out / "observations_round_1.jsonl")
    assert len(obs1) == config.n_eval + 1
    assert sum(1 for o in obs1 if o["kind"] == "anchor") == 1
    obs2 = read_jsonl(out / "observations_round_2.jsonl")
    assert len(obs2) == config.n_eval
    for rec in [*obs1, *obs2]:
        assert config.k_min <= rec["size"] <= config.k_max
        assert "wall" not in json.dumps(rec)

    sm = report.methods["optimized"]["test"]
    assert sm.accuracy + sm.adj_err + sm.non_adj_err == pytest.approx(1.0, abs=1e-9)
    # predictions carry prompt hashes
    preds = read_jsonl(out / "predictions_test.jsonl")
    assert all(len(r["prompt_hash"]) == 64 for r in preds)
    # audit rows: one per generated rationale, with prompt hashes
    audit = read_jsonl(out / "rationale_audit.jsonl")
    n_train = len(read_jsonl(task_dir / "train.jsonl"))
    n_experts = 6
    assert sum(1 for r in audit if r["round"] == 0) == n_train - n_experts
    assert all(len(r["prompt_hash"]) == 64 for r in audit)
    assert any(r["round"] == 1 for r in audit)


def test_optimize_deterministic_across_directories(task_dir, tmp_path):
    shared_cache = tmp_path / "cache"
    config_a = small_config(
        task_dir, tmp_path / "a", cache_dir=str(shared_cache), rounds=2, n_eval=6, n_init=2
    )
    config_b = small_config(
        task_dir, tmp_path / "b", cache_dir=str(shared_cache), rounds=2, n_eval=6, n_init=2
    )
    run_optimize(config_a)
    run_optimize(config_b)
    for name in [
        "observations_round_1.jsonl",
        "observations_round_2.jsonl",
        "exemplar_set.json",
        "report.json",
        "report.txt",
        "pool_round_1.jsonl",
    ]:
        assert read_bytes(tmp_path / "a" / name) == read_bytes(
            tmp_path / "b" / name
        ), f"{name} differs between identical runs"


def test_resume_matches_uninterrupted(task_dir, tmp_path):
    full_config = small_config(task_dir, tmp_path / "full", rounds=3)
    run_optimize(full_config)

    # interrupted: selection of round 2 exists but generation does not
    partial = small_config(task_dir, tmp_path / "partial", rounds=3)
    run_optimize(small_config(task_dir, tmp_path / "partial", rounds=3))
    out = tmp_path / "partial"
    (out / "pool_round_2.jsonl").unlink()
    (out / "round_3_selection.json").unlink()
    (out / "observations_round_3.jsonl").unlink()
    (out / "report.json").unlink()
    run_optimize(partial)

    for name in [
        "pool_round_2.jsonl",
        "round_3_selection.json",
        "observations_round_3.jsonl",
        "exemplar_set.json",
        "report.json",
    ]:
        assert read_bytes(tmp_path / "full" / name) == read_bytes(out / name), name


def test_resume_disabled_refuses_existing_state(task_dir, tmp_path):
    config = small_config(task_dir, tmp_path / "r")
    run_optimize(config)
    fresh = small_config(task_dir, tmp_path / "r", resume=False)
    with pytest.raises(ConfigError):
        run_optimize(fresh)


def test_rounds_one_skips_generation(task_dir, tmp_path):
    config = small_config(task_dir, tmp_path / "one", rounds=1)
    run_optimize(config)
    out = tmp_path / "one"
    assert (out / "round_1_selection.json").exists()
    assert not (out / "pool_round_1.jsonl").exists()


def test_baseline_random_fixed_subset(task_dir, tmp_path):
    config = small_config(task_dir, tmp_path / "rand", baseline_k=5)
    report = run_baseline(config, "random")
    selection = json.loads((tmp_path / "rand" / "exemplar_set.json").read_text())
    assert len(selection["indices"]) == 5
    assert "baseline_random" in report.methods

    config2 = small_config(task_dir, tmp_path / "rand2", baseline_k=5)
    run_baseline(config2, "random")
    s2 = json.loads((tmp_path / "rand2" / "exemplar_set.json").read_text())
    assert selection["indices"] == s2["indices"], "same seed must pick the same subset"


def test_baseline_naive_uses_experts(task_dir, tmp_path):
    config = small_config(task_dir, tmp_path / "naive")
    report = run_baseline(config, "naive")
    selection = json.loads((tmp_path / "naive" / "exemplar_set.json").read_text())
    assert len(selection["indices"]) == 6  # 2 experts x 3 labels
    assert all(ex["origin"] == "expert" for ex in selection["exemplars"])
    assert "baseline_naive" in report.methods
    with pytest.raises(ConfigError):
        run_baseline(config, "knn")


def test_baseline_naive_zero_shot_without_experts(tmp_path):
    config_ = SyntheticTaskConfig(label_count=2, n_items=30, boundary_fraction=0.2)
    dataset, task = generate_task(config_, seed=5)
    data = tmp_path / "data"
    write_task_files(dataset, task, data)
    config = small_config(data, tmp_path / "naive0", label_count=2)
    report = run_baseline(config, "naive")
    selection = json.loads((tmp_path / "naive0" / "exemplar_set.json").read_text())
    assert selection["indices"] == []
    assert "baseline_naive" in report.methods


def test_binary_task_end_to_end(tmp_path):
    """No experts, two labels: zero-shot anchor skipped, NonAdjErr is zero."""
    config_ = SyntheticTaskConfig(label_count=2, n_items=50, boundary_fraction=0.3)
    dataset, task = generate_task(config_, seed=3)
    data = tmp_path / "data"
    write_task_files(dataset, task, data)
    config = small_config(data, tmp_path / "bin", rounds=2, label_count=2)
    report = run_optimize(config)
    for sm in report.methods["optimized"].values():
        assert sm.non_adj_err == 0.0
        assert sm.accuracy + sm.adj_err == pytest.approx(1.0, abs=1e-9)
    assert any("binary" in note for note in report.notes)
    obs = read_jsonl(tmp_path / "bin" / "observations_round_1.jsonl")
    assert len(obs) == config.n_eval  # no expert anchor to force
    assert all(o["kind"] != "anchor" for o in obs)


def test_report_schemas_are_comparable(task_dir, tmp_path):
    opt = small_config(task_dir, tmp_path / "opt", rounds=1, n_eval=6, n_init=2)
    base = small_config(task_dir, tmp_path / "base")
    run_optimize(opt)
    run_baseline(base, "random")
    merged = merge_reports([tmp_path / "opt", tmp_path / "base"])
    assert set(merged.methods) == {"optimized", "baseline_random"}
    for splits in merged.methods.values():
        assert set(splits) == {"validation", "test"}


def test_grade_reproduces_validation_predictions(task_dir, tmp_path):
    config = small_config(task_dir, tmp_path / "g", rounds=1, n_eval=6, n_init=2)
    run_optimize(config)
    out_file = tmp_path / "grade_out.jsonl"
    n, n_err = run_grade(
        config,
        tmp_path / "g" / "exemplar_set.json",
        config.validation_path,
        out_file,
    )
    assert n_err == 0
    graded = {r["id"]: r for r in read_jsonl(out_file)}
    recorded = {
        r["id"]: r for r in read_jsonl(tmp_path / "g" / "predictions_validation.jsonl")
    }
    assert graded.keys() == recorded.keys()
    for item_id, row in graded.items():
        assert row["predicted"] == recorded[item_id]["predicted"]
        assert row["prompt_hash"] == recorded[item_id]["prompt_hash"]


def test_grade_empty_input_succeeds(task_dir, tmp_path):
    config = small_config(task_dir, tmp_path / "g2", rounds=1, n_eval=6, n_init=2)
    run_optimize(config)
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    out_file = tmp_path / "out.jsonl"
    n, n_err = run_grade(
        config, tmp_path / "g2" / "exemplar_set.json", empty, out_file
    )
    assert (n, n_err) == (0, 0)
    assert out_file.exists() and out_file.read_text() == ""


def test_grade_schema_errors_recorded(task_dir, tmp_path):
    config = small_config(task_dir, tmp_path / "g3", rounds=1, n_eval=6, n_init=2)
    run_optimize(config)
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "response": "sample-0001 text"}\n{"id": "b"}\n')
    out_file = tmp_path / "bad_out.jsonl"
    n, n_err = run_grade(
        config, tmp_path / "g3" / "exemplar_set.json", bad, out_file
    )
    assert (n, n_err) == (2, 1)
    rows = read_jsonl(out_file)
    assert "error" in rows[1] and rows[1]["id"] == "b"
    assert rows[0]["predicted"] is not None


def test_grade_invalid_exemplar_file(task_dir, tmp_path):
    config = small_config(task_dir, tmp_path / "g4")
    bad = tmp_path / "not_a_set.json"
    bad.write_text('{"wrong": true}')
    with pytest.raises(ConfigError):
        run_grade(config, bad, config.validation_path, tmp_path / "x.jsonl")


def test_output_dir_lock(task_dir, tmp_path):
    from filelock import FileLock

    config = small_config(task_dir, tmp_path / "locked")
    (tmp_path / "locked").mkdir()
    lock = FileLock(str(tmp_path / "locked" / "run.lock"))
    lock.acquire()
    try:
        with pytest.raises(ConfigError):
            run_optimize(config)
    finally:
        lock.release()
