"""End-to-end pipelines: optimize, baselines, frozen-set grading, reports.

Output directory layout (everything needed to resume a run or re-run
inference without re-optimizing):

    run.lock                       single-writer lock
    state.json                     completed rounds
    pool_round_<r>.jsonl           pool snapshot after r generation phases
    observations_round_<t>.jsonl   per-evaluation log for selection round t
    round_<t>_selection.json       chosen subset of round t (full payloads)
    rationale_audit.jsonl          generated rationales for human review
    exemplar_set.json              the frozen final demonstration set
    predictions_<split>.jsonl      per-item predictions for the final set
    report.json / report.txt       metrics per method and split
    timing.json                    wall-clock seconds (not covered by the
                                   determinism contract)

Per-round RNG streams are derived from (seed, purpose, round), so a resumed
run replays the remaining rounds exactly as an uninterrupted one would.
"""

from __future__ import annotations

import json
import logging
import os
import time
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .config import BACKEND_SYNTHETIC, RunConfig
from .embeddings import (
    EmbeddingCache,
    EmbeddingProvider,
    HttpEmbeddingProvider,
    build_similarity_matrix,
)
from .errors import BackendError, ConfigError, RunInterrupted
from .exemplars import (
    Dataset,
    DemonstrationSet,
    Exemplar,
    ExemplarPool,
    load_dataset,
    load_pool,
    read_jsonl,
    save_pool,
    write_jsonl,
)
from .grading import (
    GraderBackend,
    HttpChatBackend,
    PromptTemplate,
    ResponseCache,
    evaluate,
    grade_prompt,
    prompt_hash,
    render_prompt_from_exemplars,
    order_demonstrations,
)
from .metrics import RunReport, render_table, split_metrics
from .optimizer import SubsetObservation, run_round
from .rationales import bootstrap_rationales, run_generation_phase
from .synthetic import SyntheticBackend

logger = logging.getLogger(__name__)

_PURPOSE_SELECTION = 1
_PURPOSE_CAP = 2
_PURPOSE_BASELINE = 3

METHOD_OPTIMIZED = "optimized"


def _rng(seed: int, purpose: int, round_index: int = 0) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed & 0x7FFFFFFF, purpose, round_index])
    )


def _cap_seed(seed: int, round_index: int) -> int:
    return int(
        _rng(seed, _PURPOSE_CAP, round_index).integers(0, 2**31 - 1)
    )


def build_backend(config: RunConfig) -> GraderBackend:
    if config.backend == BACKEND_SYNTHETIC:
        return SyntheticBackend(dim=config.embed_dim)
    return HttpChatBackend(
        base_url=config.base_url,
        model=config.model,
        temperature=config.temperature,
        api_key_env=config.api_key_env,
    )


def build_embedder(config: RunConfig, backend: GraderBackend) -> EmbeddingProvider:
    if isinstance(backend, SyntheticBackend):
        return backend
    return HttpEmbeddingProvider(
        base_url=config.base_url,
        model=config.embed_model,
        dim=config.embed_dim,
        api_key_env=config.api_key_env,
    )


def load_run_dataset(config: RunConfig) -> Dataset:
    for name in ("train_path", "validation_path", "test_path", "rubric_path", "instruction_path"):
        if not getattr(config, name):
            raise ConfigError(f"config is missing {name}")
    return load_dataset(
        config.train_path,
        config.validation_path,
        config.test_path,
        config.rubric_path,
        config.instruction_path,
        label_count=config.label_count,
    )


class RunDir:
    """Paths and small JSON state under one output directory."""

    def __init__(self, out_dir: str | Path):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    def lock(self) -> FileLock:
        return FileLock(str(self.root / "run.lock"))

    def pool_path(self, revision: int) -> Path:
        return self.root / f"pool_round_{revision}.jsonl"

    def observations_path(self, round_index: int) -> Path:
        return self.root / f"observations_round_{round_index}.jsonl"

    def selection_path(self, round_index: int) -> Path:
        return self.root / f"round_{round_index}_selection.json"

    @property
    def state_path(self) -> Path:
        return self.root / "state.json"

    def read_state(self) -> dict:
        if self.state_path.exists():
            return json.loads(self.state_path.read_text(encoding="utf-8"))
        return {"completed_rounds": 0}

    def write_state(self, state: dict) -> None:
        self.write_json("state.json", state)

    def write_json(self, name: str, payload: dict) -> None:
        path = self.root / name
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(
            json.dumps(payload, sort_keys=True, indent=2), encoding="utf-8"
        )
        os.replace(tmp, path)


def _subset_payload(subset: DemonstrationSet, pool: ExemplarPool) -> dict:
    return {
        "pool_round": subset.pool_round,
        "indices": list(subset.member_indices),
        "exemplars": [
            {
                "id": ex.id,
                "response": ex.response,
                "label": ex.label,
                "rationale": ex.rationale,
                "origin": ex.origin,
                "origin_round": ex.origin_round,
                "fallback": ex.fallback,
            }
            for ex in subset.exemplars(pool)
        ],
    }


def _observation_record(obs: SubsetObservation, order: int) -> dict:
    return {
        "order": order,
        "kind": obs.kind,
        "indices": list(obs.subset.member_indices),
        "size": obs.size,
        "accuracy": obs.accuracy,
        "contrastive": obs.contrastive,
        "weights": [obs.weights.w1, obs.weights.w2, obs.weights.w3],
        "acc_star": obs.acc_star,
        "objective": obs.objective,
        "ei": obs.ei,
    }


def _caches(config: RunConfig, run_dir: RunDir) -> tuple[ResponseCache, EmbeddingCache]:
    cache_root = Path(config.cache_dir) if config.cache_dir else run_dir.root / "cache"
    return (
        ResponseCache(cache_root / "responses"),
        EmbeddingCache(cache_root / "embeddings"),
    )


def _final_metrics(
    subset_exemplars: list[Exemplar],
    indices: list[int],
    dataset: Dataset,
    backend: GraderBackend,
    template: PromptTemplate,
    cache: ResponseCache,
    run_dir: RunDir,
) -> dict:
    """Evaluate a frozen exemplar list on validation and test; write predictions."""
    ordered = order_demonstrations(subset_exemplars, indices)
    splits = {"validation": dataset.validation, "test": dataset.test}
    out = {}
    for split_name, items in splits.items():
        rows = []
        pairs = []
        n_failed = 0
        for item in items:
            prompt = render_prompt_from_exemplars(template, ordered, item.response)
            try:
                pred = grade_prompt(backend, prompt, dataset.label_set, cache)
            except BackendError:
                pred = None
            if pred is None:
                n_failed += 1
            elif item.label is not None:
                pairs.append((item.label, pred))
            rows.append(
                {
                    "id": item.id,
                    "label": item.label,
                    "predicted": pred,
                    "prompt_hash": prompt_hash(backend, prompt),
                }
            )
        if n_failed > 0.2 * len(items):
            raise BackendError(
                f"{split_name}: {n_failed}/{len(items)} items failed grading"
            )
        write_jsonl(run_dir.root / f"predictions_{split_name}.jsonl", rows)
        out[split_name] = split_metrics(pairs, dataset.label_count, n_failed=n_failed)
    return out


def _report_notes(dataset: Dataset) -> list[str]:
    notes = []
    if dataset.label_count == 2:
        notes.append(
            "binary labels: quadratic-weight kappa equals unweighted Cohen's "
            "kappa and NonAdjErr is zero by definition"
        )
    return notes


def _write_report(report: RunReport, run_dir: RunDir) -> None:
    run_dir.write_json("report.json", report.to_dict())
    (run_dir.root / "report.txt").write_text(render_table(report), encoding="utf-8")


def run_optimize(config: RunConfig) -> RunReport:
    """Full pipeline: bootstrap, T selection/generation rounds, final report."""
    dataset = load_run_dataset(config)
    template = PromptTemplate(instruction=dataset.instruction, rubric=dataset.rubric)
    backend = build_backend(config)
    embedder = build_embedder(config, backend)
    run_dir = RunDir(config.out_dir)
    timings: dict[str, float] = {}

    try:
        lock = run_dir.lock()
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise ConfigError(
            f"output directory {run_dir.root} is locked by another run"
        ) from exc

    try:
        response_cache, embedding_cache = _caches(config, run_dir)
        if not config.resume and run_dir.pool_path(0).exists():
            raise ConfigError(
                f"{run_dir.root} already holds run state; enable resume or "
                f"use a fresh output directory"
            )

        started = time.perf_counter()
        if run_dir.pool_path(0).exists():
            pool = load_pool(run_dir.pool_path(0), capacity=config.n_max, round=0)
        else:
            audit_rows: list[dict] = []
            members = bootstrap_rationales(
                dataset,
                backend,
                template,
                cache=response_cache,
                max_workers=config.fan_out,
                max_words=config.max_words,
                audit_rows=audit_rows,
            )
            pool = ExemplarPool(tuple(members), capacity=config.n_max, round=0)
            save_pool(pool, run_dir.pool_path(0))
            _append_audit(run_dir, audit_rows)
        timings["bootstrap"] = time.perf_counter() - started

        # Resume is artifact-driven: a round's selection JSON marks Phase 1
        # done, the next pool snapshot marks Phase 2 done; whatever is
        # missing is recomputed from per-round RNG streams, so interrupted
        # and uninterrupted runs produce identical artifacts.
        optimizer_config = config.optimizer_config()
        final_selection: dict | None = None
        for round_index in range(1, config.rounds + 1):
            revision = round_index - 1
            pool = load_pool(
                run_dir.pool_path(revision), capacity=config.n_max, round=revision
            )
            selection_file = run_dir.selection_path(round_index)
            if selection_file.exists():
                selection = json.loads(selection_file.read_text(encoding="utf-8"))
            else:
                started = time.perf_counter()
                sims = build_similarity_matrix(
                    pool, embedder, embedding_cache, max_workers=config.fan_out
                )
                expert_indices = pool.expert_subset_indices()
                expert_subset = (
                    DemonstrationSet(expert_indices, pool.round)
                    if expert_indices
                    else None
                )

                def evaluate_acc(subset: DemonstrationSet) -> float:
                    return evaluate(
                        backend,
                        template,
                        subset,
                        pool,
                        dataset.validation,
                        dataset.label_set,
                        cache=response_cache,
                        max_workers=config.fan_out,
                    ).accuracy

                observations: list[dict] = []

                def on_observation(obs: SubsetObservation) -> None:
                    observations.append(_observation_record(obs, len(observations)))

                best_subset, _history = run_round(
                    pool,
                    sims,
                    evaluate_acc,
                    optimizer_config,
                    _rng(config.seed, _PURPOSE_SELECTION, round_index),
                    expert_subset=expert_subset,
                    force_anchor=(round_index == 1),
                    on_observation=on_observation,
                )
                write_jsonl(run_dir.observations_path(round_index), observations)
                selection = _subset_payload(best_subset, pool)
                run_dir.write_json(f"round_{round_index}_selection.json", selection)
                timings[f"round_{round_index}_selection"] = (
                    time.perf_counter() - started
                )

            if round_index == config.rounds:
                final_selection = selection
            elif not run_dir.pool_path(round_index).exists():
                started = time.perf_counter()
                audit_rows = []
                new_pool = run_generation_phase(
                    dataset.train,
                    _load_frozen_exemplars(selection),
                    pool,
                    backend,
                    template,
                    dataset.label_count,
                    round_index,
                    _cap_seed(config.seed, round_index),
                    cache=response_cache,
                    max_workers=config.fan_out,
                    max_words=config.max_words,
                    audit_rows=audit_rows,
                )
                save_pool(new_pool, run_dir.pool_path(round_index))
                _append_audit(run_dir, audit_rows)
                timings[f"round_{round_index}_generation"] = (
                    time.perf_counter() - started
                )
            run_dir.write_state({"completed_rounds": round_index})

        assert final_selection is not None
        run_dir.write_json("exemplar_set.json", final_selection)

        started = time.perf_counter()
        frozen = _load_frozen_exemplars(final_selection)
        methods = {
            METHOD_OPTIMIZED: _final_metrics(
                frozen,
                final_selection["indices"],
                dataset,
                backend,
                template,
                response_cache,
                run_dir,
            )
        }
        timings["final_eval"] = time.perf_counter() - started
        report = RunReport(
            methods=methods,
            chosen_exemplars=final_selection["exemplars"],
            config=config.echo(),
            notes=_report_notes(dataset),
        )
        _write_report(report, run_dir)
        run_dir.write_json("timing.json", {k: round(v, 3) for k, v in timings.items()})
        return report
    except KeyboardInterrupt as exc:
        raise RunInterrupted(
            f"run interrupted; completed rounds are persisted under "
            f"{run_dir.root}, re-run the same command to resume"
        ) from exc
    finally:
        lock.release()


def _append_audit(run_dir: RunDir, rows: list[dict]) -> None:
    """Generated-rationale audit trail for human review."""
    path = run_dir.root / "rationale_audit.jsonl"
    with open(path, "a", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def _load_frozen_exemplars(selection: dict) -> list[Exemplar]:
    return [
        Exemplar(
            id=str(rec["id"]),
            response=str(rec["response"]),
            label=int(rec["label"]),
            rationale=str(rec["rationale"]),
            origin=str(rec.get("origin", "generated")),
            origin_round=rec.get("origin_round"),
            fallback=bool(rec.get("fallback", False)),
        )
        for rec in selection["exemplars"]
    ]


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

BASELINE_KINDS = ("random", "naive")


def run_baseline(config: RunConfig, kind: str) -> RunReport:
    """Fixed-subset baselines sharing the optimizer's pool and template.

    ``naive`` uses the expert exemplars as-is (zero-shot when there are
    none); ``random`` draws one seeded subset of ``baseline_k`` members and
    keeps it constant for all queries.
    """
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"unknown baseline {kind!r}; expected one of {BASELINE_KINDS}")
    dataset = load_run_dataset(config)
    template = PromptTemplate(instruction=dataset.instruction, rubric=dataset.rubric)
    backend = build_backend(config)
    run_dir = RunDir(config.out_dir)

    try:
        lock = run_dir.lock()
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise ConfigError(
            f"output directory {run_dir.root} is locked by another run"
        ) from exc

    try:
        response_cache, _embedding_cache = _caches(config, run_dir)
        if run_dir.pool_path(0).exists():
            pool = load_pool(run_dir.pool_path(0), capacity=config.n_max, round=0)
        else:
            members = bootstrap_rationales(
                dataset,
                backend,
                template,
                cache=response_cache,
                max_workers=config.fan_out,
                max_words=config.max_words,
            )
            pool = ExemplarPool(tuple(members), capacity=config.n_max, round=0)
            save_pool(pool, run_dir.pool_path(0))

        if kind == "naive":
            indices = pool.expert_subset_indices()
        else:
            if config.baseline_k > len(pool):
                raise ConfigError(
                    f"baseline_k={config.baseline_k} exceeds pool size {len(pool)}"
                )
            rng = _rng(config.seed, _PURPOSE_BASELINE)
            indices = tuple(
                int(i)
                for i in sorted(
                    rng.choice(len(pool), size=config.baseline_k, replace=False)
                )
            )
        subset = DemonstrationSet(indices, pool.round)
        selection = _subset_payload(subset, pool)
        run_dir.write_json("exemplar_set.json", selection)

        method = f"baseline_{kind}"
        methods = {
            method: _final_metrics(
                subset.exemplars(pool),
                list(indices),
                dataset,
                backend,
                template,
                response_cache,
                run_dir,
            )
        }
        report = RunReport(
            methods=methods,
            chosen_exemplars=selection["exemplars"],
            config=config.echo(),
            notes=_report_notes(dataset),
        )
        _write_report(report, run_dir)
        return report
    finally:
        lock.release()


# ---------------------------------------------------------------------------
# Frozen-set inference
# ---------------------------------------------------------------------------

def run_grade(
    config: RunConfig,
    exemplar_set_path: str | Path,
    input_path: str | Path,
    output_path: str | Path,
) -> tuple[int, int]:
    """Grade input records with a frozen exemplar set.

    Returns (n_records, n_schema_errors). Rows with schema errors carry an
    ``error`` field; backend failures are recorded per item and only fail
    the run above the 20% budget.
    """
    if not config.rubric_path or not config.instruction_path:
        raise ConfigError("grading requires rubric_path and instruction_path")
    try:
        selection = json.loads(Path(exemplar_set_path).read_text(encoding="utf-8"))
        frozen = _load_frozen_exemplars(selection)
        indices = [int(i) for i in selection["indices"]]
    except (OSError, KeyError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid exemplar set file {exemplar_set_path}: {exc}") from exc

    if config.label_count is not None:
        label_count = config.label_count
    else:
        label_count = max((ex.label for ex in frozen), default=1) + 1
    label_set = range(max(label_count, 2))
    backend = build_backend(config)
    template = PromptTemplate(
        instruction=Path(config.instruction_path).read_text(encoding="utf-8"),
        rubric=Path(config.rubric_path).read_text(encoding="utf-8"),
    )
    cache = (
        ResponseCache(Path(config.cache_dir) / "responses") if config.cache_dir else None
    )
    ordered = order_demonstrations(frozen, indices)

    records = read_jsonl(input_path)
    rows = []
    n_schema_errors = 0
    n_failed = 0
    for idx, rec in enumerate(records):
        if "response" not in rec or not isinstance(rec.get("response"), str):
            n_schema_errors += 1
            rows.append(
                {
                    "id": rec.get("id", f"record-{idx}"),
                    "error": "missing or non-string 'response'",
                }
            )
            continue
        prompt = render_prompt_from_exemplars(template, ordered, rec["response"])
        try:
            pred = grade_prompt(backend, prompt, label_set, cache)
            row = {
                "id": rec.get("id", f"record-{idx}"),
                "label": rec.get("label"),
                "predicted": pred,
                "prompt_hash": prompt_hash(backend, prompt),
            }
        except BackendError as exc:
            n_failed += 1
            row = {
                "id": rec.get("id", f"record-{idx}"),
                "label": rec.get("label"),
                "predicted": None,
                "prompt_hash": prompt_hash(backend, prompt),
                "error": str(exc),
            }
        rows.append(row)
    if records and n_failed > 0.2 * len(records):
        raise BackendError(f"grading failed on {n_failed}/{len(records)} records")
    write_jsonl(output_path, rows)
    return len(records), n_schema_errors


def merge_reports(report_paths: list[str | Path]) -> RunReport:
    """Combine per-run reports into one comparison table."""
    merged = RunReport(methods={})
    for path in report_paths:
        path = Path(path)
        if path.is_dir():
            path = path / "report.json"
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report {path}: {exc}") from exc
        report = RunReport.from_dict(data)
        for method, splits in report.methods.items():
            merged.methods[method] = splits
        for note in report.notes:
            if note not in merged.notes:
                merged.notes.append(note)
    if not merged.methods:
        raise ConfigError("no methods found in the given reports")
    return merged
