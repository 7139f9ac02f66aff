"""Balanced open-set accuracies: BAKS, BAUS, and their geometric mean.

BAKS averages per-individual accuracy over individuals present in the
training gallery; BAUS averages, over individuals absent from it, the
fraction of their images flagged as ``new_individual``. The final score is
the geometric mean of the two.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

from . import NEW_INDIVIDUAL
from .errors import UndefinedMetricError, ValidationError


@dataclass(frozen=True)
class EvalItem:
    image_id: str
    true_individual: str
    predicted: str | None = None  # individual id or NEW_INDIVIDUAL; None until classified


@dataclass(frozen=True)
class EvaluationSet:
    items: tuple[EvalItem, ...]
    known_individuals: frozenset[str]
    unknown_individuals: frozenset[str]
    counts: dict[str, int]  # images per individual within `items`

    @classmethod
    def from_items(cls, items, known_individuals, unknown_individuals) -> "EvaluationSet":
        items = tuple(items)
        known = frozenset(known_individuals)
        unknown = frozenset(unknown_individuals)
        if known & unknown:
            raise ValidationError(f"individuals tagged both known and unknown: {sorted(known & unknown)}")
        counts = Counter(item.true_individual for item in items)
        stray = set(counts) - known - unknown
        if stray:
            raise ValidationError(f"individuals missing a known/unknown tag: {sorted(stray)}")
        return cls(items=items, known_individuals=known, unknown_individuals=unknown, counts=dict(counts))

    def with_predictions(self, predictions: dict[str, str]) -> "EvaluationSet":
        """Attach a prediction to every item; missing image_ids are an error."""
        missing = [item.image_id for item in self.items if item.image_id not in predictions]
        if missing:
            raise ValidationError(f"predictions missing for image_ids: {missing}")
        return replace(
            self,
            items=tuple(replace(item, predicted=predictions[item.image_id]) for item in self.items),
        )


def _require_predictions(eval_set: EvaluationSet) -> None:
    for item in eval_set.items:
        if item.predicted is None:
            raise ValidationError(f"item {item.image_id!r} has no prediction")


def baks(eval_set: EvaluationSet) -> float:
    """Balanced accuracy on known samples: mean per-known-individual accuracy."""
    if not eval_set.known_individuals:
        raise UndefinedMetricError("BAKS undefined: no known individuals in evaluation set")
    _require_predictions(eval_set)
    correct: Counter[str] = Counter()
    for item in eval_set.items:
        if item.true_individual in eval_set.known_individuals and item.predicted == item.true_individual:
            correct[item.true_individual] += 1
    total = 0.0
    for c in eval_set.known_individuals:
        n_c = eval_set.counts.get(c, 0)
        if n_c == 0:
            raise UndefinedMetricError(f"BAKS undefined: known individual {c!r} has no images")
        total += correct[c] / n_c
    return total / len(eval_set.known_individuals)


def baus(eval_set: EvaluationSet) -> float:
    """Balanced accuracy on unknown samples: mean per-unknown flag rate."""
    if not eval_set.unknown_individuals:
        raise UndefinedMetricError("BAUS undefined: no unknown individuals in evaluation set")
    _require_predictions(eval_set)
    flagged: Counter[str] = Counter()
    for item in eval_set.items:
        if item.true_individual in eval_set.unknown_individuals and item.predicted == NEW_INDIVIDUAL:
            flagged[item.true_individual] += 1
    total = 0.0
    for c in eval_set.unknown_individuals:
        n_c = eval_set.counts.get(c, 0)
        if n_c == 0:
            raise UndefinedMetricError(f"BAUS undefined: unknown individual {c!r} has no images")
        total += flagged[c] / n_c
    return total / len(eval_set.unknown_individuals)


def final_score(baks_value: float, baus_value: float) -> float:
    """Geometric mean of BAKS and BAUS."""
    if not 0.0 <= baks_value <= 1.0 or not 0.0 <= baus_value <= 1.0:
        raise ValidationError(f"scores must lie in [0, 1], got ({baks_value}, {baus_value})")
    return math.sqrt(baks_value * baus_value)


@dataclass(frozen=True)
class ScoreReport:
    baks: float
    baus: float
    final: float

    @classmethod
    def compute(cls, eval_set: EvaluationSet) -> "ScoreReport":
        k = baks(eval_set)
        u = baus(eval_set)
        return cls(baks=k, baus=u, final=final_score(k, u))

    def to_json(self) -> str:
        return json.dumps({"baks": self.baks, "baus": self.baus, "final": self.final})

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")
