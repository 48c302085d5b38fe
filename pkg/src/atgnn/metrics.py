"""Per-class average precision and macro mAP for multi-label scores."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EvaluationError


def average_precision(scores, targets) -> float | None:
    """AP of one class; ``None`` flags a class with no positive targets.

    Ranks by descending score, ties broken by original index, and averages
    precision@r over the ranks r of the positives.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(targets).ravel()
    if s.shape != t.shape:
        raise DimensionError(f"scores {s.shape} vs targets {t.shape}")
    pos = t > 0.5
    if not pos.any():
        return None
    # lexsort uses the last key as primary; index is the secondary key
    order = np.lexsort((np.arange(s.size), -s))
    hits = pos[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


@dataclass
class EvalReport:
    mAP: float
    per_class_ap: list[float | None]
    skipped: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"mAP": self.mAP, "per_class_ap": self.per_class_ap, "skipped": self.skipped}, indent=2)


def evaluate(scores, targets) -> EvalReport:
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(targets)
    if s.ndim != 2 or s.shape != t.shape:
        raise DimensionError(f"expected matching [n, S] arrays, got {s.shape} and {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise DimensionError("targets must be binary")
    aps = [average_precision(s[:, c], t[:, c]) for c in range(s.shape[1])]
    kept = [a for a in aps if a is not None]
    if not kept:
        raise EvaluationError("every class lacks positive targets")
    skipped = [c for c, a in enumerate(aps) if a is None]
    return EvalReport(float(np.mean(kept)), aps, skipped)


def mean_average_precision(scores, targets) -> float:
    """Unweighted mean of per-class AP over classes that have positives."""
    return evaluate(scores, targets).mAP
