"""Open-set train/validation/test splitting, stratified by individual.

Individuals are partitioned into a known set (present in train) and an
unknown set (absent from train); a known individual's images are spread
across train/val/test while an unknown individual's images all go to val
or all to test. Individuals with a single image are forced into train and
counted as known.

Shuffling uses numpy's PCG64 generator seeded from the config, so a split
is fully reproducible from (dataset order, seed).
"""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .metrics import EvalItem, EvaluationSet
from .store import EmbeddingDataset

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SplitConfig:
    known_fraction: float = 0.6
    unknown_val_fraction: float = 0.2  # of all individuals; rest of unknown go to test
    image_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def validate(self) -> None:
        for name, f in (
            ("known_fraction", self.known_fraction),
            ("unknown_val_fraction", self.unknown_val_fraction),
            *zip(("train", "val", "test"), self.image_fractions),
        ):
            if not 0.0 < f <= 1.0:
                raise ValidationError(f"fraction {name}={f} outside (0, 1]")
        if abs(sum(self.image_fractions) - 1.0) > 1e-9:
            raise ValidationError(
                f"image_fractions {self.image_fractions} must sum to 1"
            )


@dataclass(frozen=True)
class SplitAssignment:
    image_split: dict[str, str]  # image_id -> train|val|test
    known_individuals: frozenset[str]
    unknown_individuals: frozenset[str]


def _largest_remainder(total: int, fractions: tuple[float, float, float], rng: np.random.Generator) -> list[int]:
    """Integer allocation of `total` over three buckets; remainder ties broken by rng."""
    quotas = [total * f for f in fractions]
    counts = [int(q) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    leftover = total - sum(counts)
    tiebreak = rng.permutation(3)
    order = sorted(range(3), key=lambda i: (-remainders[i], tiebreak[i]))
    for i in range(leftover):
        counts[order[i % 3]] += 1
    return counts


def stratified_open_set_split(dataset: EmbeddingDataset, config: SplitConfig) -> SplitAssignment:
    """Partition individuals into known/unknown and images into train/val/test."""
    config.validate()

    by_individual: OrderedDict[str, list[str]] = OrderedDict()
    for i, rec in enumerate(dataset.records):
        if rec.individual_id is None:
            raise ValidationError(f"missing individual_id at row {i} (image_id {rec.image_id!r})")
        by_individual.setdefault(rec.individual_id, []).append(rec.image_id)

    individuals = list(by_individual)
    n_ind = len(individuals)
    if n_ind < 3:
        raise ValidationError(f"need at least 3 individuals, got {n_ind}")

    rng = np.random.Generator(np.random.PCG64(config.seed))

    singletons = [c for c in individuals if len(by_individual[c]) == 1]
    multi = [c for c in individuals if len(by_individual[c]) > 1]
    shuffled = [multi[i] for i in rng.permutation(len(multi))]

    n_known_target = int(round(config.known_fraction * n_ind))
    extra_known = max(0, n_known_target - len(singletons))
    known = set(singletons) | set(shuffled[:extra_known])
    unknown_pool = shuffled[extra_known:]

    n_unknown_val = min(len(unknown_pool), int(round(config.unknown_val_fraction * n_ind)))
    unknown_val = set(unknown_pool[:n_unknown_val])

    image_split: dict[str, str] = {}
    for c in individuals:
        images = by_individual[c]
        if c in known:
            if len(images) == 1:
                image_split[images[0]] = "train"
                continue
            order = rng.permutation(len(images))
            counts = _largest_remainder(len(images), config.image_fractions, rng)
            if counts[0] == 0:
                donor = int(np.argmax(counts[1:])) + 1
                counts[donor] -= 1
                counts[0] += 1
            cursor = 0
            for split_name, count in zip(SPLITS, counts):
                for j in order[cursor : cursor + count]:
                    image_split[images[j]] = split_name
                cursor += count
        else:
            dest = "val" if c in unknown_val else "test"
            for image_id in images:
                image_split[image_id] = dest

    return SplitAssignment(
        image_split=image_split,
        known_individuals=frozenset(known),
        unknown_individuals=frozenset(c for c in individuals if c not in known),
    )


def evaluation_view(
    assignment: SplitAssignment, which: str, dataset: EmbeddingDataset
) -> EvaluationSet:
    """Ground-truth view of one evaluation split, individuals tagged known/unknown."""
    if which not in ("val", "test"):
        raise ValidationError(f"which must be 'val' or 'test', got {which!r}")
    items = [
        EvalItem(image_id=rec.image_id, true_individual=rec.individual_id)
        for rec in dataset.records
        if assignment.image_split.get(rec.image_id) == which
    ]
    if not items:
        raise ValidationError(f"split {which!r} is empty")
    present = {item.true_individual for item in items}
    return EvaluationSet.from_items(
        items,
        known_individuals=present & assignment.known_individuals,
        unknown_individuals=present & assignment.unknown_individuals,
    )


def write_split_csv(
    path: str | Path, dataset: EmbeddingDataset, assignment: SplitAssignment
) -> None:
    """Audit CSV: image_id,split,individual_id,is_known, in dataset row order."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "split", "individual_id", "is_known"])
        for rec in dataset.records:
            writer.writerow(
                [
                    rec.image_id,
                    assignment.image_split[rec.image_id],
                    rec.individual_id,
                    "true" if rec.individual_id in assignment.known_individuals else "false",
                ]
            )


def read_split_csv(path: str | Path) -> SplitAssignment:
    """Rebuild a SplitAssignment from the audit CSV."""
    image_split: dict[str, str] = {}
    known: set[str] = set()
    unknown: set[str] = set()
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image_id", "split", "individual_id", "is_known"]:
            raise ValidationError(f"{path}: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValidationError(f"{path}:{lineno}: expected 4 fields")
            image_id, split_name, individual_id, is_known = row
            if split_name not in SPLITS:
                raise ValidationError(f"{path}:{lineno}: bad split {split_name!r}")
            if image_id in image_split:
                raise ValidationError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
            image_split[image_id] = split_name
            (known if is_known == "true" else unknown).add(individual_id)
    return SplitAssignment(
        image_split=image_split,
        known_individuals=frozenset(known),
        unknown_individuals=frozenset(unknown),
    )
