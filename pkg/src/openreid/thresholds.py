"""Robust threshold calibration for the new-individual decision.

Candidate thresholds are 100 linearly spaced points within 3 MADs of the
median nearest-different-species distance (clamped at 0, since distances
are non-negative). The candidate maximizing the geometric-mean score on
the validation split wins; per-candidate scores are kept so the selection
curve can be plotted.

MAD here is the raw median absolute deviation, with no normal-consistency
scaling.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import NEW_INDIVIDUAL
from .errors import ValidationError
from .knn import FlatIndex, query
from .metrics import EvaluationSet, baks as _baks, baus as _baus, final_score


@dataclass(frozen=True)
class RobustStats:
    median: float
    mad: float


@dataclass(frozen=True)
class ThresholdCurve:
    candidates: np.ndarray
    baks_scores: np.ndarray
    baus_scores: np.ndarray
    scores: np.ndarray  # final (geometric-mean) score per candidate
    best_index: int

    @property
    def best_threshold(self) -> float:
        return float(self.candidates[self.best_index])

    @property
    def best_score(self) -> float:
        return float(self.scores[self.best_index])


def median(values) -> float:
    """Middle order statistic; even length averages the two middle values."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("median of empty input")
    if not np.isfinite(arr).all():
        raise ValidationError("median input contains non-finite values")
    return float(np.median(arr))


def mad(values) -> float:
    """Median absolute deviation from the median, unscaled."""
    arr = np.asarray(values, dtype=np.float64)
    m = median(arr)
    return float(np.median(np.abs(arr - m)))


def robust_stats(values) -> RobustStats:
    return RobustStats(median=median(values), mad=mad(values))


def cross_species_nn_distances(dataset) -> np.ndarray:
    """Per image, the L2 distance to its nearest different-species image."""
    species = [rec.species for rec in dataset.records]
    if len(set(species)) < 2:
        raise ValidationError("need at least 2 species for cross-species distances")
    X = np.asarray(dataset.matrix, dtype=np.float64)
    tags = np.asarray(species)
    out = np.empty(len(species), dtype=np.float64)
    for i in range(len(species)):
        other = tags != tags[i]
        diff = X[other] - X[i]
        out[i] = np.sqrt((diff * diff).sum(axis=1).min())
    return out


def candidate_grid(stats: RobustStats, n: int = 100, spread: float = 3.0) -> np.ndarray:
    """n linearly spaced candidates on [max(0, median - spread*mad), median + spread*mad]."""
    if n < 2:
        raise ValidationError(f"grid needs n >= 2, got {n}")
    if stats.mad == 0.0:
        warnings.warn("MAD is 0; threshold grid degenerates to the median", stacklevel=2)
        return np.array([stats.median])
    lo = max(0.0, stats.median - spread * stats.mad)
    hi = stats.median + spread * stats.mad
    return np.linspace(lo, hi, n)


def tune_threshold(
    index: FlatIndex,
    val_set: EvaluationSet,
    val_matrix: np.ndarray,
    k: int,
    grid: np.ndarray,
) -> ThresholdCurve:
    """Score every candidate threshold on the validation split; argmax wins.

    Each query's nearest distance and top-k mode label do not depend on the
    threshold, so they are computed once and the threshold is applied per
    candidate. Ties in score go to the smallest candidate.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValidationError("empty threshold grid")
    if not val_set.known_individuals or not val_set.unknown_individuals:
        raise ValidationError("validation set needs both known and unknown individuals")
    if len(val_set.items) != val_matrix.shape[0]:
        raise ValidationError(
            f"{len(val_set.items)} validation items vs {val_matrix.shape[0]} embedding rows"
        )

    from collections import Counter

    nearest = np.empty(len(val_set.items))
    modes: list[str] = []
    for i in range(val_matrix.shape[0]):
        neighbors = query(index, val_matrix[i], k)
        nearest[i] = neighbors[0][2]
        labels = [label for _, label, _ in neighbors]
        counts = Counter(labels)
        best = max(counts.values())
        modes.append(next(label for label in labels if counts[label] == best))

    baks_scores = np.empty(grid.size)
    baus_scores = np.empty(grid.size)
    scores = np.empty(grid.size)
    for j, t in enumerate(grid):
        preds = {
            item.image_id: (modes[i] if nearest[i] <= t else NEW_INDIVIDUAL)
            for i, item in enumerate(val_set.items)
        }
        scored = val_set.with_predictions(preds)
        baks_scores[j] = _baks(scored)
        baus_scores[j] = _baus(scored)
        scores[j] = final_score(baks_scores[j], baus_scores[j])

    return ThresholdCurve(
        candidates=grid,
        baks_scores=baks_scores,
        baus_scores=baus_scores,
        scores=scores,
        best_index=int(np.argmax(scores)),
    )


def write_curve_csv(path: str | Path, curve: ThresholdCurve) -> None:
    """Selection-curve CSV: threshold,baks,baus,final."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "baks", "baus", "final"])
        for t, k_, u, f in zip(curve.candidates, curve.baks_scores, curve.baus_scores, curve.scores):
            writer.writerow([repr(float(t)), repr(float(k_)), repr(float(u)), repr(float(f))])
