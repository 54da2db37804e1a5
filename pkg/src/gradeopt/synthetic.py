"""Deterministic synthetic environment: embedder, grader, task generator.

Everything here is a pure function of its inputs, so full runs against the
synthetic backend are bit-reproducible from the seed. Generated responses
carry their latent vector inline (``vec:`` marker), which the embedder
recovers exactly; arbitrary text falls back to a signed hashing embedder.

The grader is 1-nearest-neighbor over the demonstration responses parsed
back out of the prompt: context composition fully determines predictions,
which is the property the optimizer must exploit. Rationale requests return
a deterministic template referencing the nearest context demonstration, so
regenerated rationales change whenever the context does.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingProvider
from .errors import BackendError, ConfigError
from .exemplars import Dataset, EvalItem, TrainItem, write_jsonl
from .grading import GraderBackend, parse_demo_blocks, parse_grading_query
from .rationales import INFILL_MARKER, parse_infill_target

_VEC_RE = re.compile(r"vec:([-+0-9.eE,]+)")


def encode_vec(vec: np.ndarray) -> str:
    return "vec:" + ",".join(repr(float(x)) for x in vec)


def _normalize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    return vec / norm if norm > 0 else vec


def synth_embed(text: str, dim: int = 32) -> np.ndarray:
    """Unit vector for any text; latent-encoded text round-trips exactly.

    Plain text is embedded by hashing whitespace tokens into ``dim`` signed
    buckets. Empty (or fully cancelling) text maps to the basis vector e0.
    """
    m = _VEC_RE.search(text)
    if m:
        values = [float(tok) for tok in m.group(1).split(",") if tok]
        if len(values) == dim:
            return _normalize(np.asarray(values))
    vec = np.zeros(dim, dtype=np.float64)
    for token in text.split():
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:4], "big") % dim
        sign = 1.0 if digest[4] % 2 == 0 else -1.0
        vec[bucket] += sign
    if not vec.any():
        vec[0] = 1.0
    return _normalize(vec)


def synth_grade(
    demos: Sequence[tuple[str, int]], query: str, dim: int = 32
) -> int:
    """1-NN label over demo responses; ties go to the lower label; no demos
    falls back to the global prior label 0."""
    if not demos:
        return 0
    q = synth_embed(query, dim)
    best_sim = -np.inf
    best_label = 0
    for response, label in demos:
        sim = float(np.dot(synth_embed(response, dim), q))
        if sim > best_sim or (sim == best_sim and label < best_label):
            best_sim = sim
            best_label = label
    return best_label


@dataclass(frozen=True)
class SyntheticTaskConfig:
    label_count: int = 3
    n_items: int = 100
    dim: int = 32
    noise_scale: float = 0.1
    boundary_fraction: float = 0.2
    boundary_spots: int = 3
    spot_scatter: float = 0.3
    side_offset: float = 0.1
    twin_jitter: float = 0.02
    expert_per_label: int = 0

    def __post_init__(self) -> None:
        if self.label_count < 2:
            raise ConfigError("synthetic task needs at least 2 labels")
        if not 0.0 <= self.boundary_fraction <= 1.0:
            raise ConfigError("boundary_fraction must be in [0, 1]")
        if self.boundary_spots < 1:
            raise ConfigError("boundary_spots must be >= 1")
        if self.n_items < 5 * self.label_count:
            raise ConfigError("too few items for a 3:1:1 split over all labels")


@dataclass(frozen=True)
class SyntheticTask:
    """Latent geometry behind one generated dataset."""

    label_count: int
    dim: int
    centroids: tuple[tuple[float, ...], ...]
    noise_scale: float
    boundary_fraction: float
    seed: int

    def centroid_matrix(self) -> np.ndarray:
        return np.asarray(self.centroids, dtype=np.float64)

    def to_manifest(self) -> dict:
        return {
            "label_count": self.label_count,
            "dim": self.dim,
            "centroids": [list(row) for row in self.centroids],
            "noise_scale": self.noise_scale,
            "boundary_fraction": self.boundary_fraction,
            "seed": self.seed,
        }


def _orthonormal_centroids(
    rng: np.random.Generator, dim: int, count: int
) -> np.ndarray:
    basis = rng.normal(size=(dim, count))
    q, r = np.linalg.qr(basis)
    q = q * np.sign(np.diag(r))[None, :]
    return q.T.copy()


def generate_task(
    config: SyntheticTaskConfig, seed: int
) -> tuple[Dataset, SyntheticTask]:
    """Emit a labeled dataset with a 3:1:1 split and controllable boundary mass.

    Core items are noisy points around orthonormal per-label centroids.
    Boundary items live in a fixed set of "spots" scattered around each
    adjacent-centroid midpoint; every spot hosts tight twin clouds displaced
    toward either centroid by ``side_offset``. Cross-side twins within one
    spot are mutually similar (cosine well above tau) yet cross-labeled, and
    the spot/side structure is shared by all splits: a demonstration set
    holding a correctly sided exemplar for a spot resolves that spot's
    queries everywhere, while an uncovered spot falls to its nearer
    cross-label twin (off-by-one error). Boundary-aware selection therefore
    generalizes from validation to test; chance selection leaves spots open.
    """
    rng = np.random.default_rng(seed)
    k = config.label_count
    centroids = _orthonormal_centroids(rng, config.dim, k)

    spots: list[tuple[np.ndarray, np.ndarray, int, int]] = []
    for low in range(k - 1):
        mid = _normalize(centroids[low] + centroids[low + 1])
        axis = centroids[low] - centroids[low + 1]
        for _ in range(config.boundary_spots):
            center = _normalize(mid + config.spot_scatter * rng.normal(size=config.dim))
            spots.append((center, axis, low, low + 1))

    n_boundary = int(round(config.boundary_fraction * config.n_items))
    n_core = config.n_items - n_boundary
    points: list[tuple[np.ndarray, int]] = []
    for i in range(n_core):
        label = i % k
        vec = _normalize(
            centroids[label] + config.noise_scale * rng.normal(size=config.dim)
        )
        points.append((vec, label))
    while len(points) < config.n_items:
        center, axis, low, high = spots[int(rng.integers(0, len(spots)))]
        for label, side in ((low, 1.0), (high, -1.0)):
            if len(points) >= config.n_items:
                break
            twin = _normalize(
                center
                + side * config.side_offset * axis
                + config.twin_jitter * rng.normal(size=config.dim)
            )
            points.append((twin, label))

    order = rng.permutation(len(points))
    shuffled = [points[i] for i in order]
    n_train = (3 * config.n_items) // 5
    n_val = config.n_items // 5

    def response_text(seq: int, vec: np.ndarray) -> str:
        return f"sample-{seq:04d} {encode_vec(vec)}"

    train: list[TrainItem] = []
    expert_quota = {label: config.expert_per_label for label in range(k)}
    for seq, (vec, label) in enumerate(shuffled[:n_train]):
        is_expert = expert_quota[label] > 0
        if is_expert:
            expert_quota[label] -= 1
        train.append(
            TrainItem(
                id=f"tr-{seq:04d}",
                response=response_text(seq, vec),
                label=label,
                rationale=(
                    f"Expert rationale: the response shows the level {label} "
                    f"pattern required by the rubric."
                    if is_expert
                    else None
                ),
                is_expert=is_expert,
            )
        )
    validation = [
        EvalItem(
            id=f"va-{seq:04d}",
            response=response_text(n_train + seq, vec),
            label=label,
        )
        for seq, (vec, label) in enumerate(shuffled[n_train : n_train + n_val])
    ]
    test = [
        EvalItem(
            id=f"te-{seq:04d}",
            response=response_text(n_train + n_val + seq, vec),
            label=label,
        )
        for seq, (vec, label) in enumerate(shuffled[n_train + n_val :])
    ]

    rubric_lines = [
        f"Score each response with an integer from 0 to {k - 1}.",
        "Higher scores indicate a more complete response.",
    ]
    rubric_lines += [
        f"Level {level}: the response matches the level-{level} reference pattern."
        for level in range(k)
    ]
    dataset = Dataset(
        train=tuple(train),
        validation=tuple(validation),
        test=tuple(test),
        rubric="\n".join(rubric_lines),
        instruction="You are a strict grader. Score the response against the rubric.",
        label_count=k,
    )
    task = SyntheticTask(
        label_count=k,
        dim=config.dim,
        centroids=tuple(tuple(float(x) for x in row) for row in centroids),
        noise_scale=config.noise_scale,
        boundary_fraction=config.boundary_fraction,
        seed=seed,
    )
    return dataset, task


def write_task_files(dataset: Dataset, task: SyntheticTask, out_dir: str | Path) -> dict:
    """Persist splits, rubric, instruction, and the task manifest; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(
        out / "train.jsonl",
        (
            {
                "id": it.id,
                "response": it.response,
                "label": it.label,
                **({"rationale": it.rationale} if it.rationale else {}),
                **({"is_expert": True} if it.is_expert else {}),
            }
            for it in dataset.train
        ),
    )
    for name, split in (("validation", dataset.validation), ("test", dataset.test)):
        write_jsonl(
            out / f"{name}.jsonl",
            ({"id": it.id, "response": it.response, "label": it.label} for it in split),
        )
    (out / "rubric.txt").write_text(dataset.rubric, encoding="utf-8")
    (out / "instruction.txt").write_text(dataset.instruction, encoding="utf-8")
    (out / "task_manifest.json").write_text(
        json.dumps(task.to_manifest(), sort_keys=True, indent=2), encoding="utf-8"
    )
    return {
        "train": str(out / "train.jsonl"),
        "validation": str(out / "validation.jsonl"),
        "test": str(out / "test.jsonl"),
        "rubric": str(out / "rubric.txt"),
        "instruction": str(out / "instruction.txt"),
        "manifest": str(out / "task_manifest.json"),
    }


class SyntheticBackend(GraderBackend, EmbeddingProvider):
    """Offline stand-in implementing both the grader and embedder interfaces.

    Grading prompts are answered by 1-NN over the demonstrations rendered in
    the prompt; rationale prompts get a deterministic template naming the
    nearest context demonstration and a context fingerprint, so rationales
    vary exactly when the conditioning context varies.
    """

    def __init__(self, dim: int = 32):
        self.dim = dim
        self.model = "synthetic-1nn"
        self.temperature = 0.0
        self.backend_id = f"synthetic:d{dim}"
        self.provider_id = f"synthetic:d{dim}"
        self.calls = 0

    def embed_texts(self, texts: Sequence[str]) -> list[np.ndarray]:
        self.calls += 1
        return [synth_embed(t, self.dim) for t in texts]

    def complete(self, prompt: str) -> str:
        self.calls += 1
        if INFILL_MARKER in prompt:
            return self._rationale(prompt)
        return self._grade(prompt)

    def _grade(self, prompt: str) -> str:
        query = parse_grading_query(prompt)
        if query is None:
            raise BackendError("synthetic backend: prompt has no grading query")
        demos = parse_demo_blocks(prompt)
        label = synth_grade(demos, query, self.dim)
        return f"The nearest scored example sets the level.\nSCORE: {label}"

    def _rationale(self, prompt: str) -> str:
        target = parse_infill_target(prompt)
        if target is None:
            raise BackendError("synthetic backend: prompt has no infill target")
        response, label = target
        fingerprint = hashlib.sha1(prompt.encode("utf-8")).hexdigest()[:8]
        demos = parse_demo_blocks(prompt)
        if not demos:
            return f"label {label}: no context reference [ctx {fingerprint}]"
        q = synth_embed(response, self.dim)
        sims = [float(np.dot(synth_embed(r, self.dim), q)) for r, _ in demos]
        nearest = int(np.argmax(sims))
        concept = (
            f"{demos[nearest][1]}:"
            f"{hashlib.sha1(demos[nearest][0].encode('utf-8')).hexdigest()[:6]}"
        )
        return (
            f"label {label}: nearest concept {concept} at similarity "
            f"{sims[nearest]:.3f} [ctx {fingerprint}]"
        )


def nn_accuracy(
    demos: Sequence[tuple[str, int]], items: Sequence[EvalItem], dim: int = 32
) -> float:
    """Direct 1-NN accuracy oracle, bypassing prompt rendering."""
    if not items:
        raise ConfigError("nn_accuracy requires items")
    hits = sum(
        1 for it in items if synth_grade(demos, it.response, dim) == it.label
    )
    return hits / len(items)


def find_sensitive_pair(
    candidates: Sequence[tuple[str, int]],
    items: Sequence[EvalItem],
    subset_size: int,
    dim: int = 32,
) -> tuple[tuple[int, ...], tuple[int, ...], float, float]:
    """Exhaustively find the best and worst same-size demo subsets.

    Exhibits that the grading problem is non-degenerate: on boundary-heavy
    tasks the returned accuracies differ materially.
    """
    best: tuple[float, tuple[int, ...]] | None = None
    worst: tuple[float, tuple[int, ...]] | None = None
    for combo in combinations(range(len(candidates)), subset_size):
        demos = [candidates[i] for i in combo]
        acc = nn_accuracy(demos, items, dim)
        if best is None or acc > best[0]:
            best = (acc, combo)
        if worst is None or acc < worst[0]:
            worst = (acc, combo)
    assert best is not None and worst is not None
    return best[1], worst[1], best[0], worst[0]
