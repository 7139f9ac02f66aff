"""Exact flat nearest-neighbor index and the thresholded open-set rule.

Queries scan every stored vector (no approximation). Distances are true
L2 by default; a cosine mode (unit-normalize, rank by inner product) is
available since some baselines threshold cosine distance instead.

Classification: if the nearest neighbor is farther than the threshold the
query is a new individual; otherwise the answer is the most frequent label
among the top-k neighbors, with ties going to the label whose closest
representative is nearest.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import NEW_INDIVIDUAL
from .errors import ValidationError
from .store import EmbeddingDataset

METRICS = ("l2", "cosine")


@dataclass(frozen=True)
class FlatIndex:
    vectors: np.ndarray  # (n, d) float64
    labels: tuple[str, ...]
    species: tuple[str, ...]
    metric: str = "l2"

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


@dataclass(frozen=True)
class Prediction:
    image_id: str
    decision: str  # individual id or NEW_INDIVIDUAL
    nearest_distance: float
    neighbor_ids: tuple[str, ...]  # labels in non-decreasing distance order


def build_index(train: EmbeddingDataset, metric: str = "l2") -> FlatIndex:
    """Index the training rows in dataset order."""
    if metric not in METRICS:
        raise ValidationError(f"unknown metric {metric!r}")
    if len(train) == 0:
        raise ValidationError("cannot build an index from an empty train set")
    vectors = np.asarray(train.matrix, dtype=np.float64)
    if not np.isfinite(vectors).all():
        raise ValidationError("train matrix contains non-finite values")
    labels = []
    species = []
    for i, rec in enumerate(train.records):
        if rec.individual_id is None:
            raise ValidationError(f"train row {i} (image_id {rec.image_id!r}) has no individual_id")
        labels.append(rec.individual_id)
        species.append(rec.species)
    if metric == "cosine":
        vectors = _unit_rows(vectors)
    return FlatIndex(vectors=vectors, labels=tuple(labels), species=tuple(species), metric=metric)


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors / np.maximum(norms, 1e-12)


def _distances(index: FlatIndex, q: np.ndarray) -> np.ndarray:
    if index.metric == "cosine":
        qn = q / max(float(np.linalg.norm(q)), 1e-12)
        return 1.0 - index.vectors @ qn
    diff = index.vectors - q
    return np.sqrt((diff * diff).sum(axis=1))


def query(index: FlatIndex, q: np.ndarray, k: int) -> list[tuple[int, str, float]]:
    """The k nearest stored rows as (row, label, distance), ties to lower row id."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != index.dim:
        raise ValidationError(f"query dimension {q.shape} does not match index dim {index.dim}")
    if not 1 <= k <= len(index):
        raise ValidationError(f"k={k} out of range [1, {len(index)}]")
    dists = _distances(index, q)
    order = np.argsort(dists, kind="stable")[:k]
    return [(int(i), index.labels[i], float(dists[i])) for i in order]


def classify(index: FlatIndex, q: np.ndarray, k: int, threshold: float, image_id: str = "") -> Prediction:
    """Threshold on the nearest distance, else the mode of the top-k labels."""
    if threshold < 0:
        raise ValidationError(f"threshold must be >= 0, got {threshold}")
    neighbors = query(index, q, k)
    nearest = neighbors[0][2]
    labels = tuple(label for _, label, _ in neighbors)
    if nearest > threshold:
        decision = NEW_INDIVIDUAL
    else:
        counts = Counter(labels)
        best = max(counts.values())
        # neighbors are distance-ordered, so the first tied label wins
        decision = next(label for label in labels if counts[label] == best)
    return Prediction(
        image_id=image_id,
        decision=decision,
        nearest_distance=nearest,
        neighbor_ids=labels,
    )


def predict_all(
    index: FlatIndex, queries: EmbeddingDataset, k: int, threshold: float
) -> list[Prediction]:
    """One Prediction per query row, in row order."""
    if queries.matrix.shape[1] != index.dim:
        raise ValidationError(
            f"query dim {queries.matrix.shape[1]} does not match index dim {index.dim}"
        )
    return [
        classify(index, queries.matrix[i], k, threshold, image_id=rec.image_id)
        for i, rec in enumerate(queries.records)
    ]


def write_submission_csv(path: str | Path, predictions: list[Prediction]) -> None:
    """Competition-style submission: image_id,identity."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "identity"])
        for pred in predictions:
            writer.writerow([pred.image_id, pred.decision])
