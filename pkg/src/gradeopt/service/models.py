"""Pydantic request/response models for the service API."""

from __future__ import annotations

from pydantic import BaseModel, Field

from ..config import RunConfig


class ConfigModel(BaseModel):
    """Run configuration; unset fields fall back to package defaults."""

    train_path: str | None = None
    validation_path: str | None = None
    test_path: str | None = None
    rubric_path: str | None = None
    instruction_path: str | None = None
    label_count: int | None = None
    backend: str | None = None
    model: str | None = None
    embed_model: str | None = None
    base_url: str | None = None
    api_key_env: str | None = None
    temperature: float | None = None
    embed_dim: int | None = None
    rounds: int | None = None
    n_eval: int | None = None
    n_init: int | None = None
    k_min: int | None = None
    k_max: int | None = None
    tau: float | None = None
    candidate_count: int | None = None
    n_max: int | None = None
    max_words: int | None = None
    baseline_k: int | None = None
    seed: int | None = None
    fan_out: int | None = None
    out_dir: str | None = None
    cache_dir: str | None = None
    resume: bool | None = None

    def to_run_config(self) -> RunConfig:
        from ..config import load_config

        return load_config(None, overrides=self.model_dump(exclude_none=True))


class OptimizeRequest(BaseModel):
    config: ConfigModel = Field(default_factory=ConfigModel)


class BaselineRequest(BaseModel):
    kind: str
    config: ConfigModel = Field(default_factory=ConfigModel)


class GradeRequest(BaseModel):
    exemplar_set_path: str
    input_path: str
    output_path: str
    config: ConfigModel = Field(default_factory=ConfigModel)


class SynthDataRequest(BaseModel):
    out_dir: str
    n_items: int = 100
    label_count: int = 3
    dim: int = 32
    noise_scale: float = 0.1
    boundary_fraction: float = 0.2
    side_offset: float = 0.12
    twin_jitter: float = 0.03
    expert_per_label: int = 0
    seed: int = 0


class ReportRequest(BaseModel):
    paths: list[str]


class HealthResponse(BaseModel):
    status: str
    version: str


class RunReportResponse(BaseModel):
    report: dict
    table: str
    out_dir: str | None = None


class GradeResponse(BaseModel):
    output_path: str
    n_records: int
    n_schema_errors: int


class SynthDataResponse(BaseModel):
    paths: dict[str, str]
    n_train: int
    n_validation: int
    n_test: int
