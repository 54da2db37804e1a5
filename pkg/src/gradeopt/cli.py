"""Command-line client for the service API.

Every subcommand builds a typed request and sends it through the HTTP
surface: against a remote server when ``--server`` is given, otherwise
against the in-process app. Exit codes: 0 success, 1 validation error,
2 backend failure, 3 resumable interruption.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import httpx

from .config import load_config
from .errors import ConfigError
from .service.app import create_app

_EXIT_BY_KIND = {"validation": 1, "backend": 2, "interrupted": 3}


class ServiceClient:
    """Thin wrapper selecting remote vs in-process transport."""

    def __init__(self, server: str | None):
        if server:
            self._client: httpx.Client = httpx.Client(base_url=server, timeout=None)
        else:
            from fastapi.testclient import TestClient

            self._client = TestClient(create_app())

    def post(self, path: str, payload: dict) -> dict:
        response = self._client.post(path, json=payload)
        if response.status_code >= 400:
            try:
                body = response.json()
            except json.JSONDecodeError:
                body = {"detail": response.text}
            detail = body.get("detail", "request failed")
            kind = body.get("error_kind", "validation")
            click.echo(f"error: {detail}", err=True)
            sys.exit(_EXIT_BY_KIND.get(kind, 1))
        return response.json()


@click.group()
@click.option("--server", default=None, help="Remote service URL (default: in-process).")
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Boundary-focused exemplar set optimization for LLM rubric grading."""
    ctx.obj = server


def _client(ctx: click.Context) -> ServiceClient:
    return ServiceClient(ctx.obj)


def _config_options(fn):
    options = [
        click.option("--config", "config_path", default=None, help="JSON config file."),
        click.option("--data-dir", default=None, help="Directory holding train/validation/test.jsonl + rubric.txt + instruction.txt."),
        click.option("--train", "train_path", default=None),
        click.option("--validation", "validation_path", default=None),
        click.option("--test", "test_path", default=None),
        click.option("--rubric", "rubric_path", default=None),
        click.option("--instruction", "instruction_path", default=None),
        click.option("--label-count", type=int, default=None),
        click.option("--backend", type=click.Choice(["synthetic", "llm_http"]), default=None),
        click.option("--model", default=None),
        click.option("--embed-model", default=None),
        click.option("--base-url", default=None),
        click.option("--api-key-env", default=None),
        click.option("--temperature", type=float, default=None),
        click.option("--embed-dim", type=int, default=None),
        click.option("--rounds", type=int, default=None),
        click.option("--n-eval", type=int, default=None),
        click.option("--n-init", type=int, default=None),
        click.option("--k-min", type=int, default=None),
        click.option("--k-max", type=int, default=None),
        click.option("--tau", type=float, default=None),
        click.option("--candidate-count", type=int, default=None),
        click.option("--n-max", type=int, default=None),
        click.option("--max-words", type=int, default=None),
        click.option("--baseline-k", type=int, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--fan-out", type=int, default=None),
        click.option("--out-dir", default=None),
        click.option("--cache-dir", default=None),
        click.option("--resume/--no-resume", "resume", default=None),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _build_config_payload(config_path: str | None, data_dir: str | None, **overrides) -> dict:
    if data_dir:
        root = Path(data_dir)
        derived = {
            "train_path": str(root / "train.jsonl"),
            "validation_path": str(root / "validation.jsonl"),
            "test_path": str(root / "test.jsonl"),
            "rubric_path": str(root / "rubric.txt"),
            "instruction_path": str(root / "instruction.txt"),
        }
        for key, value in derived.items():
            if overrides.get(key) is None:
                overrides[key] = value
    try:
        config = load_config(config_path, overrides)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    payload = {k: v for k, v in config.echo().items()}
    payload.update(
        {
            "train_path": config.train_path,
            "validation_path": config.validation_path,
            "test_path": config.test_path,
            "rubric_path": config.rubric_path,
            "instruction_path": config.instruction_path,
            "out_dir": config.out_dir,
            "cache_dir": config.cache_dir,
            "resume": config.resume,
        }
    )
    return {k: v for k, v in payload.items() if v is not None}


@main.command()
@_config_options
@click.pass_context
def optimize(ctx: click.Context, config_path, data_dir, **overrides) -> None:
    """Run the full selection/generation loop and write the report."""
    payload = _build_config_payload(config_path, data_dir, **overrides)
    result = _client(ctx).post("/optimize", {"config": payload})
    click.echo(result["table"], nl=False)
    click.echo(f"run artifacts: {result['out_dir']}")


@main.command()
@click.argument("kind", type=click.Choice(["random", "naive"]))
@_config_options
@click.pass_context
def baseline(ctx: click.Context, kind: str, config_path, data_dir, **overrides) -> None:
    """Evaluate a fixed-subset baseline with the shared template and pool."""
    payload = _build_config_payload(config_path, data_dir, **overrides)
    result = _client(ctx).post("/baseline", {"kind": kind, "config": payload})
    click.echo(result["table"], nl=False)
    click.echo(f"run artifacts: {result['out_dir']}")


@main.command()
@click.argument("exemplar_set", type=click.Path())
@click.argument("input_file", type=click.Path())
@click.option("--output", "-o", required=True, help="Predictions JSONL path.")
@_config_options
@click.pass_context
def grade(
    ctx: click.Context, exemplar_set: str, input_file: str, output: str,
    config_path, data_dir, **overrides,
) -> None:
    """Grade records with a frozen exemplar set (no retrieval, no adaptation)."""
    payload = _build_config_payload(config_path, data_dir, **overrides)
    result = _client(ctx).post(
        "/grade",
        {
            "exemplar_set_path": exemplar_set,
            "input_path": input_file,
            "output_path": output,
            "config": payload,
        },
    )
    click.echo(
        f"graded {result['n_records']} records "
        f"({result['n_schema_errors']} schema errors) -> {result['output_path']}"
    )
    if result["n_schema_errors"] > 0:
        sys.exit(1)


@main.command("synth-data")
@click.option("--out-dir", required=True)
@click.option("--items", "n_items", type=int, default=100, show_default=True)
@click.option("--labels", "label_count", type=int, default=3, show_default=True)
@click.option("--dim", type=int, default=32, show_default=True)
@click.option("--noise", "noise_scale", type=float, default=0.1, show_default=True)
@click.option("--boundary-fraction", type=float, default=0.2, show_default=True)
@click.option("--side-offset", type=float, default=0.12, show_default=True)
@click.option("--twin-jitter", type=float, default=0.03, show_default=True)
@click.option("--experts-per-label", "expert_per_label", type=int, default=0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def synth_data(ctx: click.Context, **params) -> None:
    """Generate a deterministic synthetic grading task (3:1:1 split)."""
    result = _client(ctx).post("/synth-data", params)
    click.echo(
        f"wrote {result['n_train']}/{result['n_validation']}/{result['n_test']} "
        f"train/validation/test items"
    )
    for name, path in sorted(result["paths"].items()):
        click.echo(f"  {name}: {path}")


@main.command()
@click.argument("paths", nargs=-1, required=True)
@click.option("--output", "-o", default=None, help="Also write the table to a file.")
@click.pass_context
def report(ctx: click.Context, paths: tuple[str, ...], output: str | None) -> None:
    """Merge run reports into one comparison table."""
    result = _client(ctx).post("/report", {"paths": list(paths)})
    click.echo(result["table"], nl=False)
    if output:
        Path(output).write_text(result["table"], encoding="utf-8")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host: str, port: int) -> None:
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
