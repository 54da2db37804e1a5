"""Grading-quality metrics: accuracy, quadratic weighted kappa, and the
adjacent / non-adjacent error decomposition.

All metrics are pure functions of a confusion matrix (rows = true label,
columns = predicted). For binary label sets the quadratic weights collapse to
unweighted Cohen's kappa and NonAdjErr is zero by definition; reports note
both facts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError


def build_confusion(pairs: Iterable[tuple[int, int]], label_count: int) -> np.ndarray:
    """Count matrix from (true, predicted) pairs."""
    cm = np.zeros((label_count, label_count), dtype=np.int64)
    for true, pred in pairs:
        if not (0 <= true < label_count and 0 <= pred < label_count):
            raise ConfigError(f"label pair ({true}, {pred}) outside 0..{label_count - 1}")
        cm[true, pred] += 1
    return cm


def _validate(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise ConfigError("confusion matrix must be square with K >= 2")
    if cm.sum() <= 0:
        raise ConfigError("confusion matrix is empty")
    if (cm < 0).any():
        raise ConfigError("confusion matrix has negative counts")
    return cm


def accuracy(cm: np.ndarray) -> float:
    """Exact-match rate: trace over total."""
    cm = _validate(cm)
    return float(np.trace(cm)) / float(cm.sum())


def quadratic_weights(label_count: int) -> np.ndarray:
    idx = np.arange(label_count)
    return (idx[:, None] - idx[None, :]) ** 2 / (label_count - 1) ** 2


def qwk_details(cm: np.ndarray) -> tuple[float, bool]:
    """Quadratic weighted kappa plus a degeneracy flag.

    kappa = 1 - sum(w * O) / sum(w * E) with w_ij = (i-j)^2 / (K-1)^2,
    O the observed proportions and E the outer product of the marginals.
    When chance disagreement is zero (all mass in a single diagonal cell)
    the ratio is undefined; we report 1.0 with the flag set.
    """
    cm = _validate(cm)
    total = float(cm.sum())
    observed = cm / total
    weights = quadratic_weights(cm.shape[0])
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    denom = float((weights * expected).sum())
    numer = float((weights * observed).sum())
    if denom == 0.0:
        return 1.0, True
    return 1.0 - numer / denom, False


def qwk(cm: np.ndarray) -> float:
    return qwk_details(cm)[0]


def error_decomposition(cm: np.ndarray) -> tuple[float, float]:
    """(AdjErr, NonAdjErr): off-by-one rate and skip-a-level rate.

    For K = 2 every error is adjacent, so NonAdjErr is identically zero.
    """
    cm = _validate(cm)
    total = float(cm.sum())
    k = cm.shape[0]
    idx = np.arange(k)
    dist = np.abs(idx[:, None] - idx[None, :])
    adj = float(cm[dist == 1].sum()) / total
    non_adj = float(cm[dist >= 2].sum()) / total
    return adj, non_adj


@dataclass(frozen=True)
class SplitMetrics:
    """Metrics for one evaluation split."""

    n_items: int
    n_failed: int
    accuracy: float
    qwk: float
    qwk_degenerate: bool
    adj_err: float
    non_adj_err: float
    confusion: tuple[tuple[int, ...], ...]

    def to_dict(self) -> dict:
        return {
            "n_items": self.n_items,
            "n_failed": self.n_failed,
            "accuracy": self.accuracy,
            "qwk": self.qwk,
            "qwk_degenerate": self.qwk_degenerate,
            "adj_err": self.adj_err,
            "non_adj_err": self.non_adj_err,
            "confusion": [list(row) for row in self.confusion],
        }


def split_metrics(
    pairs: Sequence[tuple[int, int]], label_count: int, n_failed: int = 0
) -> SplitMetrics:
    """Aggregate (true, predicted) pairs for one split.

    Failed (ungraded) items are excluded from the confusion matrix but
    reported in ``n_failed``; the accuracy/AdjErr/NonAdjErr identity holds
    over the graded items.
    """
    cm = build_confusion(pairs, label_count)
    adj, non_adj = error_decomposition(cm)
    kappa, degenerate = qwk_details(cm)
    return SplitMetrics(
        n_items=len(pairs) + n_failed,
        n_failed=n_failed,
        accuracy=accuracy(cm),
        qwk=kappa,
        qwk_degenerate=degenerate,
        adj_err=adj,
        non_adj_err=non_adj,
        confusion=tuple(tuple(int(v) for v in row) for row in cm),
    )


@dataclass
class RunReport:
    """Per-split metrics plus the frozen demonstration set for one method.

    ``methods`` maps method name -> split name -> SplitMetrics, leaving room
    to merge externally computed rows into one comparison table.
    """

    methods: dict[str, dict[str, SplitMetrics]]
    chosen_exemplars: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "methods": {
                method: {split: sm.to_dict() for split, sm in splits.items()}
                for method, splits in self.methods.items()
            },
            "chosen_exemplars": self.chosen_exemplars,
            "config": self.config,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        methods = {}
        for method, splits in data.get("methods", {}).items():
            methods[method] = {}
            for split, sm in splits.items():
                methods[method][split] = SplitMetrics(
                    n_items=sm["n_items"],
                    n_failed=sm["n_failed"],
                    accuracy=sm["accuracy"],
                    qwk=sm["qwk"],
                    qwk_degenerate=sm["qwk_degenerate"],
                    adj_err=sm["adj_err"],
                    non_adj_err=sm["non_adj_err"],
                    confusion=tuple(tuple(row) for row in sm["confusion"]),
                )
        return cls(
            methods=methods,
            chosen_exemplars=data.get("chosen_exemplars", []),
            config=data.get("config", {}),
            notes=data.get("notes", []),
        )


def render_table(report: RunReport) -> str:
    """Aligned plain-text table: Acc, QWK, AdjErr, NonAdjErr per method/split."""
    header = f"{'Method':<24}{'Split':<12}{'Acc':>8}{'QWK':>8}{'AdjErr':>8}{'NonAdjErr':>11}"
    lines = [header, "-" * len(header)]
    for method in sorted(report.methods):
        for split in sorted(report.methods[method]):
            sm = report.methods[method][split]
            lines.append(
                f"{method:<24}{split:<12}"
                f"{sm.accuracy:>8.3f}{sm.qwk:>8.3f}{sm.adj_err:>8.3f}{sm.non_adj_err:>11.3f}"
            )
    return "\n".join(lines) + "\n"
