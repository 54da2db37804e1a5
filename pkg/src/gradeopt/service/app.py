"""FastAPI service wrapping the optimization, baseline, and grading pipelines.

Error mapping: validation problems -> 400, backend failures -> 502,
resumable interruptions -> 409; each body carries an ``error_kind`` the CLI
translates into its exit codes.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import BackendError, ConfigError, RunInterrupted
from ..metrics import render_table
from ..runner import merge_reports, run_baseline, run_grade, run_optimize
from ..synthetic import SyntheticTaskConfig, generate_task, write_task_files
from .models import (
    BaselineRequest,
    GradeRequest,
    GradeResponse,
    HealthResponse,
    OptimizeRequest,
    ReportRequest,
    RunReportResponse,
    SynthDataRequest,
    SynthDataResponse,
)


def create_app() -> FastAPI:
    app = FastAPI(title="gradeopt", version=__version__)

    @app.exception_handler(ConfigError)
    async def _config_error(request: Request, exc: ConfigError) -> JSONResponse:
        return JSONResponse(
            status_code=400, content={"detail": str(exc), "error_kind": "validation"}
        )

    @app.exception_handler(BackendError)
    async def _backend_error(request: Request, exc: BackendError) -> JSONResponse:
        return JSONResponse(
            status_code=502, content={"detail": str(exc), "error_kind": "backend"}
        )

    @app.exception_handler(RunInterrupted)
    async def _interrupted(request: Request, exc: RunInterrupted) -> JSONResponse:
        return JSONResponse(
            status_code=409, content={"detail": str(exc), "error_kind": "interrupted"}
        )

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/optimize", response_model=RunReportResponse)
    def optimize(request: OptimizeRequest) -> RunReportResponse:
        config = request.config.to_run_config()
        report = run_optimize(config)
        return RunReportResponse(
            report=report.to_dict(), table=render_table(report), out_dir=config.out_dir
        )

    @app.post("/baseline", response_model=RunReportResponse)
    def baseline(request: BaselineRequest) -> RunReportResponse:
        config = request.config.to_run_config()
        report = run_baseline(config, request.kind)
        return RunReportResponse(
            report=report.to_dict(), table=render_table(report), out_dir=config.out_dir
        )

    @app.post("/grade", response_model=GradeResponse)
    def grade(request: GradeRequest) -> GradeResponse:
        config = request.config.to_run_config()
        n_records, n_schema_errors = run_grade(
            config, request.exemplar_set_path, request.input_path, request.output_path
        )
        return GradeResponse(
            output_path=request.output_path,
            n_records=n_records,
            n_schema_errors=n_schema_errors,
        )

    @app.post("/synth-data", response_model=SynthDataResponse)
    def synth_data(request: SynthDataRequest) -> SynthDataResponse:
        task_config = SyntheticTaskConfig(
            label_count=request.label_count,
            n_items=request.n_items,
            dim=request.dim,
            noise_scale=request.noise_scale,
            boundary_fraction=request.boundary_fraction,
            side_offset=request.side_offset,
            twin_jitter=request.twin_jitter,
            expert_per_label=request.expert_per_label,
        )
        dataset, task = generate_task(task_config, request.seed)
        paths = write_task_files(dataset, task, request.out_dir)
        return SynthDataResponse(
            paths=paths,
            n_train=len(dataset.train),
            n_validation=len(dataset.validation),
            n_test=len(dataset.test),
        )

    @app.post("/report", response_model=RunReportResponse)
    def report(request: ReportRequest) -> RunReportResponse:
        merged = merge_reports(list(request.paths))
        return RunReportResponse(report=merged.to_dict(), table=render_table(merged))

    return app
