"""Domain types for exemplars, pools, demonstration subsets, and datasets.

An exemplar is a (response, label, rationale) triplet. Pools are immutable
per-round snapshots: demonstration subsets reference a pool by index, so a
snapshot must never be mutated once subsets have been formed against it.
Mutation happens only at round boundaries via :func:`merge_and_cap`.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

ORIGIN_EXPERT = "expert"
ORIGIN_GENERATED = "generated"

DEFAULT_POOL_CAPACITY = 512
DEFAULT_K_MIN = 4
DEFAULT_K_MAX = 16

_KEY_SEP = "\x1f"


def normalize_text(text: str) -> str:
    """Trim, collapse internal whitespace, and casefold."""
    return " ".join(text.split()).casefold()


@dataclass
class Exemplar:
    """One pool member: a graded response plus the rationale for its grade.

    ``origin`` is ``expert`` iff the rationale is human-authored;
    generated rationales carry the round they were produced in
    (0 = bootstrap). ``fallback`` marks templated rationales inserted after
    repeated generation failures. The embedding is a lazily filled cache and
    takes no part in identity.
    """

    id: str
    response: str
    label: int
    rationale: str
    origin: str = ORIGIN_GENERATED
    origin_round: int | None = None
    fallback: bool = False
    embedding: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.origin not in (ORIGIN_EXPERT, ORIGIN_GENERATED):
            raise ConfigError(f"unknown exemplar origin {self.origin!r}")
        if not self.rationale.strip():
            raise ConfigError(f"exemplar {self.id!r} has an empty rationale")
        if self.label < 0:
            raise ConfigError(f"exemplar {self.id!r} has negative label {self.label}")
        if self.origin == ORIGIN_GENERATED and self.origin_round is None:
            self.origin_round = 0

    @property
    def is_expert(self) -> bool:
        return self.origin == ORIGIN_EXPERT


def dedup_key(ex: Exemplar) -> str:
    """Pool dedup key: normalized response, label, normalized rationale."""
    return _KEY_SEP.join(
        (normalize_text(ex.response), str(ex.label), normalize_text(ex.rationale))
    )


@dataclass(frozen=True)
class ExemplarPool:
    """Immutable per-round snapshot of the candidate pool.

    ``round`` counts completed generation phases: 0 for the bootstrap pool,
    t after the t-th regeneration pass.
    """

    members: tuple[Exemplar, ...]
    capacity: int = DEFAULT_POOL_CAPACITY
    round: int = 0

    def __post_init__(self) -> None:
        keys = [dedup_key(ex) for ex in self.members]
        if len(set(keys)) != len(keys):
            raise ConfigError("pool contains duplicate (response, label, rationale)")
        if len(self.members) > self.capacity:
            raise ConfigError(
                f"pool size {len(self.members)} exceeds capacity {self.capacity}"
            )

    def __len__(self) -> int:
        return len(self.members)

    @property
    def labels(self) -> list[int]:
        return [ex.label for ex in self.members]

    @property
    def expert_indices(self) -> list[int]:
        return [i for i, ex in enumerate(self.members) if ex.is_expert]

    def expert_subset_indices(self) -> tuple[int, ...]:
        return tuple(self.expert_indices)


@dataclass(frozen=True)
class DemonstrationSet:
    """A subset of one pool snapshot, stored as sorted member indices."""

    member_indices: tuple[int, ...]
    pool_round: int

    def __post_init__(self) -> None:
        indices = tuple(sorted(set(self.member_indices)))
        if indices != self.member_indices:
            object.__setattr__(self, "member_indices", indices)

    def __len__(self) -> int:
        return len(self.member_indices)

    @classmethod
    def validated(
        cls,
        indices: Iterable[int],
        pool: ExemplarPool,
        k_min: int = DEFAULT_K_MIN,
        k_max: int = DEFAULT_K_MAX,
    ) -> "DemonstrationSet":
        """Construct enforcing size bounds and index validity for ``pool``."""
        subset = cls(tuple(indices), pool.round)
        if not k_min <= len(subset) <= k_max:
            raise ConfigError(
                f"demonstration set size {len(subset)} outside [{k_min}, {k_max}]"
            )
        if subset.member_indices and not (
            0 <= subset.member_indices[0] and subset.member_indices[-1] < len(pool)
        ):
            raise ConfigError("demonstration set indices out of pool range")
        return subset

    def exemplars(self, pool: ExemplarPool) -> list[Exemplar]:
        if self.pool_round != pool.round:
            raise ConfigError(
                f"demonstration set built on pool round {self.pool_round}, "
                f"got pool round {pool.round}"
            )
        return [pool.members[i] for i in self.member_indices]


def _cap_priority(rng_seed: int, key: str) -> str:
    blob = f"{rng_seed}{_KEY_SEP}{key}".encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def merge_and_cap(
    pool: ExemplarPool, new_batch: Sequence[Exemplar], rng_seed: int
) -> ExemplarPool:
    """Merge a batch into the pool, dedup, and cap at capacity.

    Existing members win over incoming duplicates. When over capacity, all
    expert members are kept and exactly ``capacity - n_experts`` generated
    members are sampled uniformly without replacement by keeping the lowest
    seeded hashes of the dedup keys. Hash-priority selection depends only on
    the member set and the seed, so re-merging the same batch into the
    result is a no-op (idempotence) while the marginal keep probability
    stays uniform.
    """
    seen: dict[str, Exemplar] = {}
    for ex in pool.members:
        seen[dedup_key(ex)] = ex
    for ex in new_batch:
        if not ex.rationale.strip():
            raise ConfigError(f"batch exemplar {ex.id!r} has an empty rationale")
        seen.setdefault(dedup_key(ex), ex)

    union = list(seen.values())
    experts = [ex for ex in union if ex.is_expert]
    if len(experts) > pool.capacity:
        raise ConfigError(
            f"{len(experts)} expert exemplars exceed pool capacity {pool.capacity}"
        )

    if len(union) > pool.capacity:
        n_keep = pool.capacity - len(experts)
        generated = sorted(
            (ex for ex in union if not ex.is_expert),
            key=lambda ex: _cap_priority(rng_seed, dedup_key(ex)),
        )
        kept_keys = {dedup_key(ex) for ex in generated[:n_keep]}
        kept_keys.update(dedup_key(ex) for ex in experts)
        union = [ex for ex in union if dedup_key(ex) in kept_keys]

    return ExemplarPool(
        members=tuple(union), capacity=pool.capacity, round=pool.round + 1
    )


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainItem:
    id: str
    response: str
    label: int
    rationale: str | None = None
    is_expert: bool = False


@dataclass(frozen=True)
class EvalItem:
    id: str
    response: str
    label: int | None = None


@dataclass(frozen=True)
class Dataset:
    """Train/validation/test splits plus the shared rubric and instruction.

    Labels form a contiguous set {0, ..., label_count - 1}.
    """

    train: tuple[TrainItem, ...]
    validation: tuple[EvalItem, ...]
    test: tuple[EvalItem, ...]
    rubric: str
    instruction: str
    label_count: int

    def __post_init__(self) -> None:
        if self.label_count < 2:
            raise ConfigError("label_count must be at least 2")
        ids = [it.id for it in (*self.train, *self.validation, *self.test)]
        if len(set(ids)) != len(ids):
            raise ConfigError("train/validation/test ids are not pairwise disjoint")
        for it in self.train:
            if it.is_expert and not (it.rationale or "").strip():
                raise ConfigError(f"expert item {it.id!r} lacks a rationale")
        labeled = [it.label for it in self.train]
        labeled += [it.label for it in (*self.validation, *self.test) if it.label is not None]
        for lab in labeled:
            if not 0 <= lab < self.label_count:
                raise ConfigError(f"label {lab} outside 0..{self.label_count - 1}")

    @property
    def label_set(self) -> range:
        return range(self.label_count)

    @property
    def expert_items(self) -> list[TrainItem]:
        return [it for it in self.train if it.is_expert]


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
    return records


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    """Write records atomically (temp file + rename) so partially written
    files never survive a crash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _require(record: dict, key: str, path: str | Path, idx: int):
    if key not in record:
        raise ConfigError(f"{path}: record {idx} missing field {key!r}")
    return record[key]


def load_train_split(path: str | Path) -> list[TrainItem]:
    items = []
    for idx, rec in enumerate(read_jsonl(path)):
        items.append(
            TrainItem(
                id=str(_require(rec, "id", path, idx)),
                response=str(_require(rec, "response", path, idx)),
                label=int(_require(rec, "label", path, idx)),
                rationale=rec.get("rationale"),
                is_expert=bool(rec.get("is_expert", False)),
            )
        )
    return items


def load_eval_split(path: str | Path, require_label: bool = True) -> list[EvalItem]:
    items = []
    for idx, rec in enumerate(read_jsonl(path)):
        label = rec.get("label")
        if label is None and require_label:
            raise ConfigError(f"{path}: record {idx} missing field 'label'")
        items.append(
            EvalItem(
                id=str(_require(rec, "id", path, idx)),
                response=str(_require(rec, "response", path, idx)),
                label=None if label is None else int(label),
            )
        )
    return items


def load_dataset(
    train_path: str | Path,
    validation_path: str | Path,
    test_path: str | Path,
    rubric_path: str | Path,
    instruction_path: str | Path,
    label_count: int | None = None,
) -> Dataset:
    """Load the three JSONL splits plus rubric/instruction text files.

    When ``label_count`` is omitted it is inferred as max observed label + 1.
    """
    train = load_train_split(train_path)
    validation = load_eval_split(validation_path)
    test = load_eval_split(test_path)
    if not train:
        raise ConfigError(f"{train_path}: empty train split")
    if label_count is None:
        observed = [it.label for it in train]
        observed += [it.label for it in (*validation, *test) if it.label is not None]
        label_count = max(observed) + 1
    return Dataset(
        train=tuple(train),
        validation=tuple(validation),
        test=tuple(test),
        rubric=Path(rubric_path).read_text(encoding="utf-8"),
        instruction=Path(instruction_path).read_text(encoding="utf-8"),
        label_count=max(label_count, 2),
    )


# ---------------------------------------------------------------------------
# Pool persistence (JSONL, embeddings excluded)
# ---------------------------------------------------------------------------

def pool_to_records(pool: ExemplarPool) -> list[dict]:
    return [
        {
            "id": ex.id,
            "response": ex.response,
            "label": ex.label,
            "rationale": ex.rationale,
            "origin": ex.origin,
            "origin_round": ex.origin_round,
            "fallback": ex.fallback,
        }
        for ex in pool.members
    ]


def save_pool(pool: ExemplarPool, path: str | Path) -> None:
    write_jsonl(path, pool_to_records(pool))


def load_pool(
    path: str | Path, capacity: int = DEFAULT_POOL_CAPACITY, round: int = 0
) -> ExemplarPool:
    members = []
    for rec in read_jsonl(path):
        members.append(
            Exemplar(
                id=str(rec["id"]),
                response=str(rec["response"]),
                label=int(rec["label"]),
                rationale=str(rec["rationale"]),
                origin=str(rec.get("origin", ORIGIN_GENERATED)),
                origin_round=rec.get("origin_round"),
                fallback=bool(rec.get("fallback", False)),
            )
        )
    return ExemplarPool(members=tuple(members), capacity=capacity, round=round)


def strip_embeddings(pool: ExemplarPool) -> ExemplarPool:
    """Copy of the pool with embedding caches cleared (for persistence tests)."""
    return ExemplarPool(
        members=tuple(replace(ex, embedding=None) for ex in pool.members),
        capacity=pool.capacity,
        round=pool.round,
    )
