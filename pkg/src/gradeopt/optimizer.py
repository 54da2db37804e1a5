"""Constrained Bayesian optimization over demonstration subsets.

One round: seed the history with random subsets, then alternate
(resample weights -> rescore history -> refit GP -> propose candidates via
contrastive operators -> evaluate the max-EI candidate) until the budget is
spent, and finally pick the best observation lexicographically.

Subsets are encoded for the surrogate as binary membership vectors over the
round's pool snapshot. Weights are resampled every iteration, so GP targets
are recomputed for the whole history under the current weights before each
fit; the history itself stores the values used at observation time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .embeddings import SimilarityMatrix, boundary_candidates, contrastive_score
from .errors import BackendError, ConfigError
from .exemplars import (
    DEFAULT_K_MAX,
    DEFAULT_K_MIN,
    DEFAULT_POOL_CAPACITY,
    DemonstrationSet,
    ExemplarPool,
)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

GP_NOISE_VARIANCE = 1e-4
GP_SIGNAL_FLOOR = 1e-6


@dataclass(frozen=True)
class ObjectiveWeights:
    """Scalarization weights; w2 and w3 are tied to w1 so they sum to 1."""

    w1: float
    w2: float
    w3: float

    def __post_init__(self) -> None:
        if not 0.25 <= self.w1 <= 1.0:
            raise ConfigError(f"w1={self.w1} outside [0.25, 1.0]")
        if abs(self.w2 - 0.8 * (1.0 - self.w1)) > 1e-12:
            raise ConfigError("w2 must equal 0.8 * (1 - w1)")
        if abs(self.w3 - 0.2 * (1.0 - self.w1)) > 1e-12:
            raise ConfigError("w3 must equal 0.2 * (1 - w1)")

    @classmethod
    def from_w1(cls, w1: float) -> "ObjectiveWeights":
        return cls(w1=w1, w2=0.8 * (1.0 - w1), w3=0.2 * (1.0 - w1))


def sample_weights(rng: np.random.Generator) -> ObjectiveWeights:
    return ObjectiveWeights.from_w1(float(rng.uniform(0.25, 1.0)))


def scalarize(
    accuracy: float,
    size: int,
    contrastive: float,
    acc_star: float,
    weights: ObjectiveWeights,
) -> float:
    """max(w1 * (acc - acc*), w2 * (-size)) + w3 * contrastive.

    The size term uses the raw negative cardinality, so with any accuracy
    near acc* the max() resolves to the accuracy branch and size acts only
    as a soft pressure.
    """
    return max(
        weights.w1 * (accuracy - acc_star), weights.w2 * (-float(size))
    ) + weights.w3 * contrastive


@dataclass(frozen=True)
class OptimizerConfig:
    rounds: int = 5
    n_eval: int = 32
    n_init: int = 8
    k_min: int = DEFAULT_K_MIN
    k_max: int = DEFAULT_K_MAX
    tau: float = 0.7
    candidate_count: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if not 2 <= self.n_init < self.n_eval:
            raise ConfigError("need 2 <= n_init < n_eval (the GP fit needs 2 points)")
        if not 1 <= self.k_min <= self.k_max <= DEFAULT_POOL_CAPACITY:
            raise ConfigError("need 1 <= k_min <= k_max <= pool capacity")
        if self.rounds < 1 or self.candidate_count < 1:
            raise ConfigError("rounds and candidate_count must be positive")


@dataclass(frozen=True)
class SubsetObservation:
    """One evaluated subset: the GP training datum.

    ``objective`` is reproducible bit-exactly from the stored accuracy, size,
    contrastive score, weights, and the acc_star in effect when observed.
    """

    subset: DemonstrationSet
    accuracy: float
    size: int
    contrastive: float
    objective: float
    weights: ObjectiveWeights
    acc_star: float
    kind: str = "bo"  # init | anchor | bo
    ei: float | None = None


def membership_vector(subset: DemonstrationSet, pool_size: int) -> np.ndarray:
    vec = np.zeros(pool_size, dtype=np.float64)
    vec[list(subset.member_indices)] = 1.0
    return vec


# ---------------------------------------------------------------------------
# Gaussian process surrogate
# ---------------------------------------------------------------------------

@dataclass
class SurrogateModel:
    """Exact GP regression with an RBF kernel on membership vectors.

    Hyperparameters are fixed per fit: length scale sqrt(k_max) (the typical
    Hamming distance between feasible subsets), signal variance equal to the
    target variance (floored), observation noise 1e-4. Targets are centered
    during fitting, so far from data the posterior mean reverts to their mean.
    """

    length_scale: float
    signal_variance: float
    noise_variance: float
    train_x: np.ndarray
    train_y: np.ndarray
    _mean: float = field(init=False, default=0.0)
    _chol: np.ndarray = field(init=False, repr=False, default=None)  # type: ignore[assignment]
    _alpha: np.ndarray = field(init=False, repr=False, default=None)  # type: ignore[assignment]

    def _kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        sq = (
            np.sum(a**2, axis=1)[:, None]
            + np.sum(b**2, axis=1)[None, :]
            - 2.0 * (a @ b.T)
        )
        np.clip(sq, 0.0, None, out=sq)
        return self.signal_variance * np.exp(-sq / (2.0 * self.length_scale**2))

    def fit(self) -> None:
        n = self.train_x.shape[0]
        self._mean = float(np.mean(self.train_y))
        gram = self._kernel(self.train_x, self.train_x)
        for jitter in (self.noise_variance, 10.0 * self.noise_variance):
            try:
                self._chol = np.linalg.cholesky(gram + jitter * np.eye(n))
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise BackendError("GP kernel matrix not positive definite")
        centered = self.train_y - self._mean
        self._alpha = np.linalg.solve(
            self._chol.T, np.linalg.solve(self._chol, centered)
        )

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at rows of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        k_star = self._kernel(x, self.train_x)
        mean = self._mean + k_star @ self._alpha
        v = np.linalg.solve(self._chol, k_star.T)
        var = self.signal_variance - np.sum(v**2, axis=0)
        np.clip(var, 0.0, None, out=var)
        return mean, var


def fit_surrogate(
    history: Sequence[SubsetObservation],
    pool_size: int,
    targets: Sequence[float] | None = None,
    k_max: int = DEFAULT_K_MAX,
) -> SurrogateModel:
    """Fit the GP on membership vectors; ``targets`` override the stored g."""
    if len(history) < 2:
        raise ConfigError("surrogate needs at least 2 observations")
    x = np.vstack([membership_vector(o.subset, pool_size) for o in history])
    y = np.asarray(
        [o.objective for o in history] if targets is None else list(targets),
        dtype=np.float64,
    )
    model = SurrogateModel(
        length_scale=math.sqrt(k_max),
        signal_variance=max(float(np.var(y)), GP_SIGNAL_FLOOR),
        noise_variance=GP_NOISE_VARIANCE,
        train_x=x,
        train_y=y,
    )
    model.fit()
    return model


def _norm_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / _SQRT2))


def _norm_pdf(z: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * z * z)


def expected_improvement_values(
    mean: np.ndarray, std: np.ndarray, g_plus: float
) -> np.ndarray:
    """EI = (mu - g+) * Phi(z) + sigma * phi(z) with z = (mu - g+) / sigma.

    Degenerate sigma collapses to the deterministic improvement
    max(0, mu - g+).
    """
    out = np.empty(len(mean), dtype=np.float64)
    for i in range(len(mean)):
        improvement = mean[i] - g_plus
        if std[i] < 1e-12:
            out[i] = max(0.0, improvement)
            continue
        z = improvement / std[i]
        out[i] = max(0.0, improvement * _norm_cdf(z) + std[i] * _norm_pdf(z))
    return out


def expected_improvement(
    model: SurrogateModel, candidate_vector: np.ndarray, g_plus: float
) -> float:
    mean, var = model.predict(candidate_vector)
    return float(
        expected_improvement_values(mean, np.sqrt(var), g_plus)[0]
    )


# ---------------------------------------------------------------------------
# Candidate generation via contrastive operators
# ---------------------------------------------------------------------------

def random_subset(
    pool: ExemplarPool,
    rng: np.random.Generator,
    k_min: int,
    k_max: int,
) -> DemonstrationSet:
    hi = min(k_max, len(pool))
    if hi < k_min:
        raise ConfigError(f"pool of {len(pool)} cannot satisfy k_min={k_min}")
    size = int(rng.integers(k_min, hi + 1))
    indices = rng.choice(len(pool), size=size, replace=False)
    return DemonstrationSet(tuple(int(i) for i in indices), pool.round)


def contrastive_add_candidates(
    e_best: DemonstrationSet,
    pool: ExemplarPool,
    sims: SimilarityMatrix,
    tau: float,
    k_max: int,
) -> list[DemonstrationSet]:
    """Insert one boundary candidate next to its anchor (skipped at k_max)."""
    if len(e_best) + 1 > k_max:
        return []
    best = set(e_best.member_indices)
    out = []
    seen = {e_best.member_indices}
    for i in e_best.member_indices:
        for j in boundary_candidates(i, e_best, pool, sims, tau):
            indices = tuple(sorted(best | {j}))
            if indices not in seen:
                seen.add(indices)
                out.append(DemonstrationSet(indices, pool.round))
    return out


def contrastive_swap_candidates(
    e_best: DemonstrationSet,
    pool: ExemplarPool,
    sims: SimilarityMatrix,
    tau: float,
) -> list[DemonstrationSet]:
    """Replace each anchor with one of its boundary candidates."""
    best = set(e_best.member_indices)
    out = []
    seen = {e_best.member_indices}
    for i in e_best.member_indices:
        for j in boundary_candidates(i, e_best, pool, sims, tau):
            indices = tuple(sorted((best - {i}) | {j}))
            if indices not in seen:
                seen.add(indices)
                out.append(DemonstrationSet(indices, pool.round))
    return out


def one_flip_candidate(
    e_best: DemonstrationSet,
    pool: ExemplarPool,
    rng: np.random.Generator,
    k_min: int,
    k_max: int,
) -> DemonstrationSet | None:
    """Toggle one uniformly chosen pool element, respecting size bounds."""
    best = set(e_best.member_indices)
    elem = int(rng.integers(0, len(pool)))
    if elem in best:
        if len(best) - 1 < k_min:
            return None
        indices = tuple(sorted(best - {elem}))
    else:
        if len(best) + 1 > k_max:
            return None
        indices = tuple(sorted(best | {elem}))
    return DemonstrationSet(indices, pool.round)


def generate_candidates(
    e_best: DemonstrationSet,
    pool: ExemplarPool,
    sims: SimilarityMatrix,
    expert_subset: DemonstrationSet | None,
    rng: np.random.Generator,
    config: OptimizerConfig,
    observed: frozenset[tuple[int, ...]] = frozenset(),
) -> list[DemonstrationSet]:
    """Propose up to candidate_count unobserved subsets within size bounds.

    Contrastive-Add inserts a boundary candidate next to its anchor,
    Contrastive-Swap replaces the anchor with it; One-Flip toggles one pool
    element; Random draws whole subsets from the pool. Contrastive output is
    kept in full at the expense of the later generators when the cap binds.
    The expert subset, when defined and feasible, is always appended.
    """
    k_min, k_max = config.k_min, config.k_max
    cap = config.candidate_count
    seen: set[tuple[int, ...]] = set(observed)
    seen.add(e_best.member_indices)

    def admit(candidate: DemonstrationSet, out: list[DemonstrationSet]) -> None:
        indices = candidate.member_indices
        if k_min <= len(indices) <= k_max and indices not in seen:
            seen.add(indices)
            out.append(candidate)

    contrastive: list[DemonstrationSet] = []
    for candidate in contrastive_add_candidates(e_best, pool, sims, config.tau, k_max):
        admit(candidate, contrastive)
    for candidate in contrastive_swap_candidates(e_best, pool, sims, config.tau):
        admit(candidate, contrastive)
    if len(contrastive) > cap:
        keep = rng.choice(len(contrastive), size=cap, replace=False)
        contrastive = [contrastive[k] for k in sorted(keep)]

    one_flip: list[DemonstrationSet] = []
    remaining = cap - len(contrastive)
    flip_target = remaining // 2 if remaining > 1 else remaining
    attempts = 0
    while len(one_flip) < flip_target and attempts < 8 * max(flip_target, 1):
        attempts += 1
        candidate = one_flip_candidate(e_best, pool, rng, k_min, k_max)
        if candidate is not None:
            admit(candidate, one_flip)

    randoms: list[DemonstrationSet] = []
    rand_target = cap - len(contrastive) - len(one_flip)
    attempts = 0
    while len(randoms) < rand_target and attempts < 8 * max(rand_target, 1):
        attempts += 1
        admit(random_subset(pool, rng, k_min, k_max), randoms)

    out = contrastive + one_flip + randoms
    if (
        expert_subset is not None
        and k_min <= len(expert_subset) <= k_max
        and expert_subset.member_indices not in observed
        and expert_subset.member_indices not in {c.member_indices for c in out}
        and expert_subset.member_indices != e_best.member_indices
    ):
        out.append(expert_subset)
    return out


# ---------------------------------------------------------------------------
# Round loop and final selection
# ---------------------------------------------------------------------------

def run_round(
    pool: ExemplarPool,
    sims: SimilarityMatrix,
    evaluate_acc: Callable[[DemonstrationSet], float],
    config: OptimizerConfig,
    rng: np.random.Generator,
    expert_subset: DemonstrationSet | None = None,
    force_anchor: bool = False,
    on_observation: Callable[[SubsetObservation], None] | None = None,
) -> tuple[DemonstrationSet, list[SubsetObservation]]:
    """One selection phase: n_init random evaluations then EI-driven picks.

    ``evaluate_acc`` is the expensive validation-accuracy call. When
    ``force_anchor`` is set the expert subset is evaluated once up front (an
    extra observation beyond the budget) unless it was already drawn.
    Returns the lexicographically selected subset and the full history.
    """
    history: list[SubsetObservation] = []
    observed: set[tuple[int, ...]] = set()

    def record(
        subset: DemonstrationSet,
        kind: str,
        weights: ObjectiveWeights,
        ei: float | None = None,
    ) -> None:
        acc_star = max((o.accuracy for o in history), default=0.0)
        acc = evaluate_acc(subset)
        contr = contrastive_score(subset, sims, pool.labels, config.tau)
        obs = SubsetObservation(
            subset=subset,
            accuracy=acc,
            size=len(subset),
            contrastive=contr,
            objective=scalarize(acc, len(subset), contr, acc_star, weights),
            weights=weights,
            acc_star=acc_star,
            kind=kind,
            ei=ei,
        )
        history.append(obs)
        observed.add(subset.member_indices)
        if on_observation:
            on_observation(obs)

    for _ in range(config.n_init):
        subset = random_subset(pool, rng, config.k_min, config.k_max)
        for _retry in range(1000):
            if subset.member_indices not in observed:
                break
            subset = random_subset(pool, rng, config.k_min, config.k_max)
        record(subset, "init", sample_weights(rng))

    if (
        force_anchor
        and expert_subset is not None
        and config.k_min <= len(expert_subset) <= config.k_max
        and expert_subset.member_indices not in observed
    ):
        record(expert_subset, "anchor", sample_weights(rng))

    pool_size = len(pool)
    for _ in range(config.n_eval - config.n_init):
        weights = sample_weights(rng)
        acc_star = max(o.accuracy for o in history)
        targets = [
            scalarize(o.accuracy, o.size, o.contrastive, acc_star, weights)
            for o in history
        ]
        model = fit_surrogate(history, pool_size, targets=targets, k_max=config.k_max)
        g_plus = max(targets)
        e_best = history[int(np.argmax(targets))].subset

        candidates = generate_candidates(
            e_best, pool, sims, expert_subset, rng, config, frozenset(observed)
        )
        if not candidates:
            break
        x = np.vstack([membership_vector(c, pool_size) for c in candidates])
        mean, var = model.predict(x)
        ei = expected_improvement_values(mean, np.sqrt(var), g_plus)
        pick = int(np.argmax(ei))
        record(candidates[pick], "bo", weights, ei=float(ei[pick]))

    if not history:
        raise BackendError("round produced no successful evaluations")
    best = select_final(history, sims, pool.labels, config.tau)
    return best, history


def select_final(
    history: Sequence[SubsetObservation],
    sims: SimilarityMatrix,
    labels: Sequence[int],
    tau: float,
) -> DemonstrationSet:
    """Lexicographic winner: max accuracy, then max contrastive score, then
    min size; residual ties go to the earliest observation."""
    if not history:
        raise ConfigError("select_final requires a non-empty history")
    best_idx = 0
    best_key: tuple[float, float, float] | None = None
    for idx, obs in enumerate(history):
        key = (
            obs.accuracy,
            contrastive_score(obs.subset, sims, labels, tau),
            -float(len(obs.subset)),
        )
        if best_key is None or key > best_key:
            best_key = key
            best_idx = idx
    return history[best_idx].subset
