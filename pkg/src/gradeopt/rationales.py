"""Discriminative rationale generation via contrastive infill.

The model is teacher-forced: it receives the true score and must articulate
why that score applies to the exclusion of its neighbors. The per-label
instruction follows the missing / prevents / sufficient structure, stated
for any contiguous label set:

  lowest label  -> what is MISSING for a higher score
  middle labels -> what PREVENTS the score below, what is MISSING for above
  top label     -> what makes the response SUFFICIENT

Phase 0 bootstraps rationales for every non-expert training item with the
expert exemplars as context; Phase 2 regenerates rationales for all training
items with the round's optimal subset as context, adding new (response,
label, rationale) variants to the pool without mutating existing members.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

from .errors import BackendError, ConfigError
from .exemplars import (
    Exemplar,
    ExemplarPool,
    TrainItem,
    Dataset,
    ORIGIN_EXPERT,
    ORIGIN_GENERATED,
    merge_and_cap,
)
from .grading import (
    GraderBackend,
    PromptTemplate,
    ResponseCache,
    cached_complete,
    order_demonstrations,
    prompt_hash,
    render_demo_block,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_WORDS = 120

_INFILL_TARGET_RE = re.compile(
    r"## Task\nWrite the grading rationale for the response below\.\n"
    r"Response: (.*?)\nAssigned score: (\d+)\n",
    re.S,
)
INFILL_MARKER = "Write the grading rationale for the response below."


def _label_list(labels: Sequence[int]) -> str:
    words = [str(v) for v in labels]
    if len(words) == 1:
        return words[0]
    if len(words) == 2:
        return f"{words[0]} or {words[1]}"
    return ", ".join(words[:-1]) + f", or {words[-1]}"


def infill_instruction(label: int, label_count: int) -> str:
    """Score-conditioned boundary articulation for a contiguous label set."""
    if not 0 <= label < label_count:
        raise ConfigError(f"label {label} outside 0..{label_count - 1}")
    others = [v for v in range(label_count) if v != label]
    not_clause = f"(not a {_label_list(others)})"
    if label == 0:
        return (
            f"Explain why this deserves a {label} {not_clause}. Specifically "
            f"mention what is MISSING that would be needed for a higher score."
        )
    if label == label_count - 1:
        return (
            f"Explain why this deserves a {label} {not_clause}. Specifically "
            f"mention what makes this SUFFICIENT for the highest score."
        )
    return (
        f"Explain why this deserves a {label} {not_clause}. Mention what "
        f"PREVENTS it from being a {label - 1}, and what is MISSING for a {label + 1}."
    )


def render_infill_prompt(
    template: PromptTemplate,
    context: Sequence[Exemplar],
    response: str,
    label: int,
    label_count: int,
    max_words: int = DEFAULT_MAX_WORDS,
) -> str:
    """Byte-stable infill prompt for one (response, label) target."""
    ordered = order_demonstrations(list(context))
    demo_section = ""
    if ordered:
        demo_section = f"## Scored examples\n{render_demo_block(ordered)}\n"
    return (
        f"{template.instruction}\n\n"
        f"## Rubric\n{template.rubric}\n\n"
        f"{demo_section}"
        f"## Task\n{INFILL_MARKER}\n"
        f"Response: {response}\n"
        f"Assigned score: {label}\n"
        f"{infill_instruction(label, label_count)}\n"
        f"Keep the rationale under {max_words} words. "
        f"Reply with the rationale text only.\n"
    )


def parse_infill_target(prompt: str) -> tuple[str, int] | None:
    """(response, label) of an infill prompt, or None for other prompts."""
    m = _INFILL_TARGET_RE.search(prompt)
    return (m.group(1), int(m.group(2))) if m else None


def contrastive_infill(
    response: str,
    label: int,
    context: Sequence[Exemplar],
    backend: GraderBackend,
    label_count: int,
    template: PromptTemplate,
    cache: ResponseCache | None = None,
    max_words: int = DEFAULT_MAX_WORDS,
) -> str:
    """Generate one rationale; output is free text used verbatim (trimmed)."""
    prompt = render_infill_prompt(
        template, context, response, label, label_count, max_words
    )
    out = cached_complete(backend, prompt, cache).strip()
    if not out:
        raise BackendError("empty rationale from backend")
    return out


def fallback_rationale(label: int, label_count: int) -> str:
    if label == 0:
        return f"Response does not meet the rubric requirements (level {label})."
    if label == label_count - 1:
        return f"Response fully meets rubric level {label}."
    return f"Response meets rubric level {label}."


def _generate_with_retry(
    item: TrainItem,
    context: Sequence[Exemplar],
    backend: GraderBackend,
    label_count: int,
    template: PromptTemplate,
    cache: ResponseCache | None,
    max_words: int,
) -> tuple[str, bool, str]:
    """(rationale, used_fallback, prompt hash): retry once, then fall back."""
    prompt = render_infill_prompt(
        template, context, item.response, item.label, label_count, max_words
    )
    key = prompt_hash(backend, prompt)
    for _attempt in range(2):
        try:
            text = cached_complete(backend, prompt, cache).strip()
            if not text:
                raise BackendError("empty rationale from backend")
            return text, False, key
        except BackendError as exc:
            logger.warning("rationale generation for %s failed: %s", item.id, exc)
    return fallback_rationale(item.label, label_count), True, key


def _generate_batch(
    items: Sequence[TrainItem],
    context: Sequence[Exemplar],
    backend: GraderBackend,
    label_count: int,
    template: PromptTemplate,
    cache: ResponseCache | None,
    max_workers: int,
    max_words: int,
) -> list[tuple[str, bool, str]]:
    def _one(item: TrainItem) -> tuple[str, bool, str]:
        return _generate_with_retry(
            item, context, backend, label_count, template, cache, max_words
        )

    if max_workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(_one, items))
    return [_one(item) for item in items]


def expert_exemplars(dataset: Dataset) -> list[Exemplar]:
    out = []
    for item in dataset.expert_items:
        out.append(
            Exemplar(
                id=item.id,
                response=item.response,
                label=item.label,
                rationale=item.rationale or "",
                origin=ORIGIN_EXPERT,
            )
        )
    return out


def bootstrap_rationales(
    dataset: Dataset,
    backend: GraderBackend,
    template: PromptTemplate,
    cache: ResponseCache | None = None,
    max_workers: int = 1,
    max_words: int = DEFAULT_MAX_WORDS,
    audit_rows: list[dict] | None = None,
) -> list[Exemplar]:
    """Build the initial pool members: experts as-is, the rest infilled.

    The expert exemplars (possibly none) serve as shared context; with no
    experts the generation is zero-shot against the rubric alone. Failed
    generations enter flagged with a templated fallback so every training
    item is represented.
    """
    experts = expert_exemplars(dataset)
    rest = [it for it in dataset.train if not it.is_expert]
    generated = _generate_batch(
        rest,
        experts,
        backend,
        dataset.label_count,
        template,
        cache,
        max_workers,
        max_words,
    )
    out = list(experts)
    for item, (rationale, used_fallback, key) in zip(rest, generated):
        out.append(
            Exemplar(
                id=f"{item.id}:g0",
                response=item.response,
                label=item.label,
                rationale=rationale,
                origin=ORIGIN_GENERATED,
                origin_round=0,
                fallback=used_fallback,
            )
        )
        if audit_rows is not None:
            audit_rows.append(
                {
                    "round": 0,
                    "item_id": item.id,
                    "label": item.label,
                    "prompt_hash": key,
                    "rationale": rationale,
                    "fallback": used_fallback,
                }
            )
    return out


def run_generation_phase(
    train_items: Sequence[TrainItem],
    context: Sequence[Exemplar],
    pool: ExemplarPool,
    backend: GraderBackend,
    template: PromptTemplate,
    label_count: int,
    round_index: int,
    cap_seed: int,
    cache: ResponseCache | None = None,
    max_workers: int = 1,
    max_words: int = DEFAULT_MAX_WORDS,
    failure_budget: float = 0.2,
    audit_rows: list[dict] | None = None,
) -> ExemplarPool:
    """Regenerate rationales for all training items and merge into the pool.

    Per-item failures are skipped (no fallback variant is added; the item is
    already represented from bootstrap); the phase fails when more than
    ``failure_budget`` of items fail.
    """
    generated = _generate_batch(
        list(train_items),
        context,
        backend,
        label_count,
        template,
        cache,
        max_workers,
        max_words,
    )
    n_failed = sum(1 for _, failed, _key in generated if failed)
    if n_failed > failure_budget * max(len(train_items), 1):
        raise BackendError(
            f"generation phase failed: {n_failed}/{len(train_items)} items"
        )
    batch = []
    for item, (rationale, used_fallback, key) in zip(train_items, generated):
        if used_fallback:
            continue
        batch.append(
            Exemplar(
                id=f"{item.id}:g{round_index}",
                response=item.response,
                label=item.label,
                rationale=rationale,
                origin=ORIGIN_GENERATED,
                origin_round=round_index,
            )
        )
        if audit_rows is not None:
            audit_rows.append(
                {
                    "round": round_index,
                    "item_id": item.id,
                    "label": item.label,
                    "prompt_hash": key,
                    "rationale": rationale,
                    "fallback": False,
                }
            )
    return merge_and_cap(pool, batch, cap_seed)
