"""Embedding providers, cosine similarity, and boundary-pair machinery.

Exemplars embed as response + newline + rationale, so regenerated rationales
produce new vectors. All vectors leaving this module are L2-normalized
regardless of provider.

Note the deliberate asymmetry: the subset-level contrastive score counts
pairs with *any* distinct labels, while operator candidate generation
(:func:`boundary_candidates`) requires strictly adjacent labels.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import httpx
import numpy as np

from .errors import BackendError, ConfigError
from .exemplars import DemonstrationSet, Exemplar, ExemplarPool

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.7


class EmbeddingProvider(ABC):
    """Deterministic text -> unit vector interface."""

    provider_id: str
    dim: int

    @abstractmethod
    def embed_texts(self, texts: Sequence[str]) -> list[np.ndarray]:
        """Return one raw vector per text; callers normalize."""


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise BackendError("embedding provider returned a zero vector")
    return vec / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two unit vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"cosine dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


class EmbeddingCache:
    """Content-addressed vector store keyed by (provider id, text hash).

    Keeps an in-memory map and optionally mirrors entries to JSON files under
    ``cache_dir``. Safe for concurrent use.
    """

    def __init__(self, cache_dir: str | Path | None = None):
        self._mem: dict[tuple[str, str], np.ndarray] = {}
        self._lock = threading.Lock()
        self._dir = Path(cache_dir) if cache_dir else None
        if self._dir:
            self._dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def _text_key(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def _path(self, provider_id: str, key: str) -> Path:
        assert self._dir is not None
        safe_provider = hashlib.sha256(provider_id.encode("utf-8")).hexdigest()[:16]
        return self._dir / f"{safe_provider}-{key}.json"

    def get(self, provider_id: str, text: str) -> np.ndarray | None:
        key = self._text_key(text)
        with self._lock:
            vec = self._mem.get((provider_id, key))
        if vec is not None:
            return vec
        if self._dir:
            path = self._path(provider_id, key)
            if path.exists():
                vec = np.asarray(json.loads(path.read_text()), dtype=np.float64)
                with self._lock:
                    self._mem[(provider_id, key)] = vec
                return vec
        return None

    def put(self, provider_id: str, text: str, vec: np.ndarray) -> None:
        key = self._text_key(text)
        with self._lock:
            self._mem[(provider_id, key)] = vec
        if self._dir:
            path = self._path(provider_id, key)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps([float(x) for x in vec]))
            os.replace(tmp, path)


def embed_texts_cached(
    provider: EmbeddingProvider,
    texts: Sequence[str],
    cache: EmbeddingCache | None = None,
    max_workers: int = 1,
) -> list[np.ndarray]:
    """Embed texts through the cache with bounded parallel fan-out."""
    results: list[np.ndarray | None] = [None] * len(texts)
    missing: list[int] = []
    for i, text in enumerate(texts):
        hit = cache.get(provider.provider_id, text) if cache else None
        if hit is not None:
            results[i] = hit
        else:
            missing.append(i)

    def _one(idx: int) -> None:
        vec = l2_normalize(provider.embed_texts([texts[idx]])[0])
        if cache:
            cache.put(provider.provider_id, texts[idx], vec)
        results[idx] = vec

    if missing:
        if max_workers > 1 and len(missing) > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                list(pool.map(_one, missing))
        else:
            for idx in missing:
                _one(idx)
    return [vec for vec in results if vec is not None]


def exemplar_embed_text(ex: Exemplar) -> str:
    return f"{ex.response}\n{ex.rationale}"


def embed_exemplar(
    ex: Exemplar,
    provider: EmbeddingProvider,
    cache: EmbeddingCache | None = None,
) -> np.ndarray:
    """Unit-norm embedding of response + rationale, cached on the exemplar."""
    if ex.embedding is not None:
        return ex.embedding
    vec = embed_texts_cached(provider, [exemplar_embed_text(ex)], cache)[0]
    ex.embedding = vec
    return vec


@dataclass(frozen=True)
class SimilarityMatrix:
    """Pairwise cosine cache for one pool snapshot; exactly symmetric."""

    pool_round: int
    entries: np.ndarray

    def __post_init__(self) -> None:
        n, m = self.entries.shape
        if n != m:
            raise ConfigError("similarity matrix must be square")

    def sim(self, i: int, j: int) -> float:
        return float(self.entries[i, j])


def build_similarity_matrix(
    pool: ExemplarPool,
    provider: EmbeddingProvider,
    cache: EmbeddingCache | None = None,
    max_workers: int = 1,
) -> SimilarityMatrix:
    texts = [exemplar_embed_text(ex) for ex in pool.members]
    vecs = embed_texts_cached(provider, texts, cache, max_workers=max_workers)
    for ex, vec in zip(pool.members, vecs):
        ex.embedding = vec
    mat = np.vstack(vecs) if vecs else np.zeros((0, provider.dim))
    entries = mat @ mat.T
    entries = (entries + entries.T) / 2.0
    np.clip(entries, -1.0, 1.0, out=entries)
    return SimilarityMatrix(pool_round=pool.round, entries=entries)


def is_boundary_pair(
    i: int,
    j: int,
    sims: SimilarityMatrix,
    labels: Sequence[int],
    tau: float = DEFAULT_TAU,
) -> bool:
    """High-similarity pair carrying distinct ground-truth labels."""
    if i == j:
        raise ConfigError("boundary pair requires two distinct members")
    return sims.sim(i, j) >= tau and labels[i] != labels[j]


def contrastive_score(
    subset: DemonstrationSet | Sequence[int],
    sims: SimilarityMatrix,
    labels: Sequence[int],
    tau: float = DEFAULT_TAU,
) -> float:
    """Fraction of unordered pairs in the subset that are boundary pairs."""
    indices = (
        subset.member_indices
        if isinstance(subset, DemonstrationSet)
        else tuple(subset)
    )
    n = len(indices)
    if n < 2:
        return 0.0
    hits = 0
    for a in range(n):
        for b in range(a + 1, n):
            if is_boundary_pair(indices[a], indices[b], sims, labels, tau):
                hits += 1
    return hits / (n * (n - 1) / 2)


def boundary_candidates(
    i: int,
    e_best: DemonstrationSet,
    pool: ExemplarPool,
    sims: SimilarityMatrix,
    tau: float = DEFAULT_TAU,
) -> list[int]:
    """Pool members outside the subset that sit just across the boundary.

    Unlike the contrastive score, candidates must carry a *strictly adjacent*
    label. Sorted by descending similarity, ties by ascending index.
    """
    labels = pool.labels
    inside = set(e_best.member_indices)
    out = [
        j
        for j in range(len(pool))
        if j not in inside
        and sims.sim(i, j) >= tau
        and abs(labels[i] - labels[j]) == 1
    ]
    out.sort(key=lambda j: (-sims.sim(i, j), j))
    return out


# ---------------------------------------------------------------------------
# Remote provider (OpenAI-style /embeddings endpoint)
# ---------------------------------------------------------------------------

class HttpEmbeddingProvider(EmbeddingProvider):
    """Chat-platform embeddings endpoint client with bounded retries.

    The API key is read from ``api_key_env`` at call time and never logged.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        dim: int,
        api_key_env: str = "GRADEOPT_API_KEY",
        max_retries: int = 3,
        timeout: float = 60.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dim = dim
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.timeout = timeout
        self.provider_id = f"http:{model}"
        self.calls = 0

    def embed_texts(self, texts: Sequence[str]) -> list[np.ndarray]:
        api_key = os.environ.get(self.api_key_env, "")
        payload = {"model": self.model, "input": list(texts)}
        last_err: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                self.calls += 1
                resp = httpx.post(
                    f"{self.base_url}/embeddings",
                    json=payload,
                    headers={"Authorization": f"Bearer {api_key}"},
                    timeout=self.timeout,
                )
                resp.raise_for_status()
                data = resp.json()["data"]
                logger.debug(
                    "embeddings call ok: model=%s n_texts=%d", self.model, len(texts)
                )
                return [np.asarray(d["embedding"], dtype=np.float64) for d in data]
            except Exception as exc:  # noqa: BLE001 - retried, then wrapped
                last_err = exc
                logger.warning(
                    "embeddings attempt %d/%d failed: %s",
                    attempt + 1,
                    self.max_retries,
                    exc,
                )
        raise BackendError(f"embedding request failed after retries: {last_err}")
