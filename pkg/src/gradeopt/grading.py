"""Prompt assembly, grader backends, score parsing, and evaluation.

One prompt template is shared by every method and every demonstration set in
a run; methods differ only in which demonstrations they select.
Demonstrations render in (label ascending, pool index ascending) order so
identical subsets always produce byte-identical prompts, which is what makes
the response cache effective.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import httpx

from .errors import BackendError, ConfigError
from .exemplars import DemonstrationSet, EvalItem, Exemplar, ExemplarPool

logger = logging.getLogger(__name__)

SCORE_DIRECTIVE = "Reply with your reasoning, then end with a line `SCORE: <integer>`."
REASK_SUFFIX = (
    "\n\nYour previous reply did not contain a parsable score. "
    "Answer again and end with a line `SCORE: <integer>`."
)

_SCORE_MARKER_RE = re.compile(r"SCORE:\s*(-?\d+)")
_STANDALONE_INT_RE = re.compile(r"(?<![\w.-])(-?\d+)(?!\w|\.\d)")
_DEMO_RE = re.compile(r"Response: (.*?)\nScore: (\d+)\n", re.S)
_QUERY_RE = re.compile(
    r"## Task\nGrade the following response against the rubric\.\n"
    r"Response: (.*?)\n\nReply with",
    re.S,
)


class UnparsableScore(BackendError):
    """Model output contained no usable score."""


@dataclass(frozen=True)
class PromptTemplate:
    """Fixed instruction + rubric shared across all prompts in a run."""

    instruction: str
    rubric: str


def render_demo_block(exemplars: Sequence[Exemplar]) -> str:
    """Render demonstrations, assumed already ordered."""
    parts = []
    for n, ex in enumerate(exemplars, start=1):
        parts.append(
            f"### Example {n}\n"
            f"Response: {ex.response}\n"
            f"Score: {ex.label}\n"
            f"Rationale: {ex.rationale}\n"
        )
    return "\n".join(parts)


def order_demonstrations(
    exemplars: Sequence[Exemplar], indices: Sequence[int] | None = None
) -> list[Exemplar]:
    """Label ascending, then pool index (or list position) ascending."""
    if indices is None:
        indices = range(len(exemplars))
    paired = sorted(zip(indices, exemplars), key=lambda p: (p[1].label, p[0]))
    return [ex for _, ex in paired]


def render_prompt_from_exemplars(
    template: PromptTemplate, exemplars: Sequence[Exemplar], query_response: str
) -> str:
    demo_section = ""
    if exemplars:
        demo_section = f"## Scored examples\n{render_demo_block(exemplars)}\n"
    return (
        f"{template.instruction}\n\n"
        f"## Rubric\n{template.rubric}\n\n"
        f"{demo_section}"
        f"## Task\nGrade the following response against the rubric.\n"
        f"Response: {query_response}\n\n"
        f"{SCORE_DIRECTIVE}\n"
    )


def render_prompt(
    template: PromptTemplate,
    subset: DemonstrationSet,
    pool: ExemplarPool,
    query_response: str,
) -> str:
    exemplars = subset.exemplars(pool)
    ordered = order_demonstrations(exemplars, subset.member_indices)
    return render_prompt_from_exemplars(template, ordered, query_response)


def parse_demo_blocks(prompt: str) -> list[tuple[str, int]]:
    """Recover (response, label) pairs from a rendered prompt.

    Used by the synthetic backend, which re-reads its context from the prompt
    text; harness responses never contain the block markers.
    """
    return [(m.group(1), int(m.group(2))) for m in _DEMO_RE.finditer(prompt)]


def parse_grading_query(prompt: str) -> str | None:
    m = _QUERY_RE.search(prompt)
    return m.group(1) if m else None


def parse_score(raw_output: str, label_set: Sequence[int] | range) -> int:
    """Extract the integer after the last SCORE: marker.

    Falls back to the last standalone integer that is a member of the label
    set. Raises :class:`UnparsableScore` when neither rule applies.
    """
    labels = set(label_set)
    markers = _SCORE_MARKER_RE.findall(raw_output)
    if markers:
        value = int(markers[-1])
        if value in labels:
            return value
    in_set = [int(tok) for tok in _STANDALONE_INT_RE.findall(raw_output) if int(tok) in labels]
    if in_set:
        return in_set[-1]
    raise UnparsableScore(f"no score in label set found in output: {raw_output[:120]!r}")


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class GraderBackend(ABC):
    """Frozen scoring model: prompt text in, completion text out."""

    backend_id: str
    model: str
    temperature: float
    calls: int = 0

    @abstractmethod
    def complete(self, prompt: str) -> str:
        """Run one completion; implementations count invocations in ``calls``."""


class HttpChatBackend(GraderBackend):
    """OpenAI-style chat-completions client with bounded retries.

    Request/response bodies are logged at DEBUG level; the API key is read
    from the environment per call and redacted from all logs.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        temperature: float = 0.2,
        api_key_env: str = "GRADEOPT_API_KEY",
        max_retries: int = 3,
        timeout: float = 120.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.temperature = temperature
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.timeout = timeout
        self.backend_id = f"http:{model}@{temperature}"
        self.calls = 0

    def complete(self, prompt: str) -> str:
        api_key = os.environ.get(self.api_key_env, "")
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        logger.debug("chat request: %s", json.dumps(payload)[:2000])
        last_err: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                self.calls += 1
                resp = httpx.post(
                    f"{self.base_url}/chat/completions",
                    json=payload,
                    headers={"Authorization": f"Bearer {api_key}"},
                    timeout=self.timeout,
                )
                resp.raise_for_status()
                body = resp.json()
                logger.debug("chat response: %s", json.dumps(body)[:2000])
                return body["choices"][0]["message"]["content"]
            except Exception as exc:  # noqa: BLE001 - retried, then wrapped
                last_err = exc
                logger.warning(
                    "chat attempt %d/%d failed: %s", attempt + 1, self.max_retries, exc
                )
        raise BackendError(f"chat request failed after retries: {last_err}")


class ResponseCache:
    """Completion cache keyed by SHA-256 of (model, temperature, prompt)."""

    def __init__(self, cache_dir: str | Path | None = None):
        self._mem: dict[str, str] = {}
        self._lock = threading.Lock()
        self._dir = Path(cache_dir) if cache_dir else None
        if self._dir:
            self._dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(backend: GraderBackend, prompt: str) -> str:
        blob = f"{backend.model}\x1f{backend.temperature!r}\x1f{prompt}"
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def get(self, backend: GraderBackend, prompt: str) -> str | None:
        key = self.key(backend, prompt)
        with self._lock:
            hit = self._mem.get(key)
        if hit is not None:
            return hit
        if self._dir:
            path = self._dir / f"{key}.json"
            if path.exists():
                hit = json.loads(path.read_text())["output"]
                with self._lock:
                    self._mem[key] = hit
                return hit
        return None

    def put(self, backend: GraderBackend, prompt: str, output: str) -> None:
        key = self.key(backend, prompt)
        with self._lock:
            self._mem[key] = output
        if self._dir:
            path = self._dir / f"{key}.json"
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps({"output": output}))
            os.replace(tmp, path)


def cached_complete(
    backend: GraderBackend, prompt: str, cache: ResponseCache | None
) -> str:
    if cache is not None:
        hit = cache.get(backend, prompt)
        if hit is not None:
            return hit
    out = backend.complete(prompt)
    if cache is not None:
        cache.put(backend, prompt, out)
    return out


def prompt_hash(backend: GraderBackend, prompt: str) -> str:
    return ResponseCache.key(backend, prompt)


# ---------------------------------------------------------------------------
# Grading and evaluation
# ---------------------------------------------------------------------------

def grade_prompt(
    backend: GraderBackend,
    prompt: str,
    label_set: Sequence[int] | range,
    cache: ResponseCache | None = None,
) -> int:
    """Complete and parse, retrying once with a re-ask suffix."""
    raw = cached_complete(backend, prompt, cache)
    try:
        return parse_score(raw, label_set)
    except UnparsableScore:
        raw = cached_complete(backend, prompt + REASK_SUFFIX, cache)
        return parse_score(raw, label_set)


def grade_one(
    backend: GraderBackend,
    template: PromptTemplate,
    subset: DemonstrationSet,
    pool: ExemplarPool,
    item: EvalItem,
    label_set: Sequence[int] | range,
    cache: ResponseCache | None = None,
) -> int:
    prompt = render_prompt(template, subset, pool, item.response)
    return grade_prompt(backend, prompt, label_set, cache)


@dataclass(frozen=True)
class EvaluationResult:
    """Predictions for one split; ``predicted`` is None for failed items."""

    predictions: tuple[tuple[str, int | None, int | None], ...]
    accuracy: float
    n_failed: int

    @property
    def pairs(self) -> list[tuple[int, int]]:
        """(true, predicted) pairs for items with both labels known."""
        return [
            (t, p) for _, t, p in self.predictions if t is not None and p is not None
        ]


def evaluate(
    backend: GraderBackend,
    template: PromptTemplate,
    subset: DemonstrationSet,
    pool: ExemplarPool,
    items: Sequence[EvalItem],
    label_set: Sequence[int] | range,
    cache: ResponseCache | None = None,
    max_workers: int = 1,
    failure_budget: float = 0.2,
) -> EvaluationResult:
    """Grade every item; accuracy counts failed items as incorrect.

    Fails outright when more than ``failure_budget`` of items cannot be
    graded. Items may be graded with bounded parallel fan-out; results are
    keyed by position, so the output is order-independent of scheduling.
    """
    if not items:
        raise ConfigError("evaluate requires a non-empty item list")
    exemplars = order_demonstrations(
        subset.exemplars(pool), subset.member_indices
    )

    def _grade(item: EvalItem) -> int | None:
        prompt = render_prompt_from_exemplars(template, exemplars, item.response)
        try:
            return grade_prompt(backend, prompt, label_set, cache)
        except BackendError as exc:
            logger.warning("item %s failed: %s", item.id, exc)
            return None

    if max_workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool_exec:
            preds = list(pool_exec.map(_grade, items))
    else:
        preds = [_grade(item) for item in items]

    n_failed = sum(1 for p in preds if p is None)
    if n_failed > failure_budget * len(items):
        raise BackendError(
            f"evaluation failed: {n_failed}/{len(items)} items ungradable"
        )
    rows = tuple(
        (item.id, item.label, pred) for item, pred in zip(items, preds)
    )
    hits = sum(1 for _, t, p in rows if t is not None and p == t)
    return EvaluationResult(
        predictions=rows, accuracy=hits / len(items), n_failed=n_failed
    )
