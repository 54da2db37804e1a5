"""Run-level configuration: defaults, file loading, and override precedence.

Defaults follow the standard operating point: 5 rounds, 32 evaluations per
round, subset size 4..16, similarity threshold 0.7, 256 acquisition
candidates, pool cap 512, temperature 0.2. Values resolve as
CLI flag > config file > default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .optimizer import OptimizerConfig

BACKEND_SYNTHETIC = "synthetic"
BACKEND_LLM_HTTP = "llm_http"


@dataclass(frozen=True)
class RunConfig:
    # dataset
    train_path: str = ""
    validation_path: str = ""
    test_path: str = ""
    rubric_path: str = ""
    instruction_path: str = ""
    label_count: int | None = None
    # backend
    backend: str = BACKEND_SYNTHETIC
    model: str = "gpt-4o-mini"
    embed_model: str = "text-embedding-3-small"
    base_url: str = "https://api.openai.com/v1"
    api_key_env: str = "GRADEOPT_API_KEY"
    temperature: float = 0.2
    embed_dim: int = 32
    # optimization
    rounds: int = 5
    n_eval: int = 32
    n_init: int = 8
    k_min: int = 4
    k_max: int = 16
    tau: float = 0.7
    candidate_count: int = 256
    n_max: int = 512
    max_words: int = 120
    baseline_k: int = 8
    seed: int = 0
    # execution
    fan_out: int = 8
    out_dir: str = "runs/run"
    cache_dir: str | None = None
    resume: bool = True

    def __post_init__(self) -> None:
        if self.backend not in (BACKEND_SYNTHETIC, BACKEND_LLM_HTTP):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.fan_out < 1:
            raise ConfigError("fan_out must be >= 1")
        if self.n_max < 1:
            raise ConfigError("n_max must be >= 1")
        if self.k_max > self.n_max:
            raise ConfigError("k_max cannot exceed the pool cap")
        self.optimizer_config()  # validates the optimization block

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            rounds=self.rounds,
            n_eval=self.n_eval,
            n_init=self.n_init,
            k_min=self.k_min,
            k_max=self.k_max,
            tau=self.tau,
            candidate_count=self.candidate_count,
            seed=self.seed,
        )

    def echo(self) -> dict:
        """Hyperparameters for the report; filesystem paths are excluded so
        reports from different directories stay byte-comparable."""
        skip = {
            "train_path",
            "validation_path",
            "test_path",
            "rubric_path",
            "instruction_path",
            "out_dir",
            "cache_dir",
            "resume",
        }
        return {k: v for k, v in asdict(self).items() if k not in skip}


def load_config(
    config_path: str | Path | None = None, overrides: dict | None = None
) -> RunConfig:
    """Merge defaults, a JSON config file, and non-None overrides."""
    values: dict = {}
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        values.update(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**values)
