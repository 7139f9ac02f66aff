"""Canonical on-disk embedding dataset: metadata CSV plus EMB1 binary matrix.

The EMB1 layout is fixed and little-endian:

    bytes 0-3   ASCII magic "EMB1"
    byte  4     version, 0x01
    bytes 5-8   uint32 row count n
    bytes 9-12  uint32 dimension d
    then        n*d float32 values, row-major

The metadata CSV carries one row per matrix row, in matrix order, with
header ``image_id,individual_id,species,split_hint``. An empty
``individual_id`` field marks an unlabeled query image.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

EMB1_MAGIC = b"EMB1"
EMB1_VERSION = 1
_HEADER = struct.Struct("<4sBII")

CSV_HEADER = ["image_id", "individual_id", "species", "split_hint"]
SPLIT_HINTS = {"", "database", "query"}


@dataclass(frozen=True)
class MetadataRecord:
    """One image's metadata; ``individual_id`` of None marks an unlabeled query."""

    image_id: str
    individual_id: str | None
    species: str
    split_hint: str | None = None


@dataclass(frozen=True)
class EmbeddingDataset:
    """Ordered metadata records paired with an n x d float32 matrix."""

    records: list[MetadataRecord]
    matrix: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.records)

    def validate(self) -> None:
        validate_dataset(self)


def validate_dataset(dataset: EmbeddingDataset) -> None:
    """Raise ValidationError naming the first offending row, if any."""
    matrix = dataset.matrix
    if matrix.ndim != 2:
        raise ValidationError(f"matrix must be 2-D, got shape {matrix.shape}")
    if matrix.shape[0] != len(dataset.records):
        raise ValidationError(
            f"row count mismatch: {matrix.shape[0]} matrix rows vs "
            f"{len(dataset.records)} metadata records"
        )
    bad = np.flatnonzero(~np.isfinite(matrix).all(axis=1))
    if bad.size:
        raise ValidationError(f"non-finite embedding values at row {int(bad[0])}")
    seen: set[str] = set()
    for i, rec in enumerate(dataset.records):
        if not rec.image_id:
            raise ValidationError(f"empty image_id at row {i}")
        if rec.image_id in seen:
            raise ValidationError(f"duplicate image_id {rec.image_id!r} at row {i}")
        seen.add(rec.image_id)
        if not rec.species:
            raise ValidationError(f"empty species at row {i} (image_id {rec.image_id!r})")
        if rec.split_hint not in (None, "database", "query"):
            raise ValidationError(
                f"bad split_hint {rec.split_hint!r} at row {i}"
            )


def write_dataset(dataset: EmbeddingDataset, meta_path: str | Path, matrix_path: str | Path) -> None:
    """Write the metadata CSV and EMB1 binary. Round-trips bit-exactly."""
    validate_dataset(dataset)
    meta_path = Path(meta_path)
    matrix_path = Path(matrix_path)

    with meta_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for rec in dataset.records:
            writer.writerow(
                [
                    rec.image_id,
                    rec.individual_id if rec.individual_id is not None else "",
                    rec.species,
                    rec.split_hint if rec.split_hint is not None else "",
                ]
            )

    payload = np.ascontiguousarray(dataset.matrix, dtype="<f4")
    n, d = payload.shape
    with matrix_path.open("wb") as fh:
        fh.write(_HEADER.pack(EMB1_MAGIC, EMB1_VERSION, n, d))
        fh.write(payload.tobytes(order="C"))


def read_matrix(matrix_path: str | Path) -> np.ndarray:
    """Read and validate an EMB1 file into an n x d float32 array."""
    raw = Path(matrix_path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{matrix_path}: truncated header")
    magic, version, n, d = _HEADER.unpack_from(raw)
    if magic != EMB1_MAGIC:
        raise ValidationError(f"{matrix_path}: bad magic {magic!r}")
    if version != EMB1_VERSION:
        raise ValidationError(f"{matrix_path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n * d
    if len(raw) != expected:
        raise ValidationError(
            f"{matrix_path}: payload size {len(raw) - _HEADER.size} does not match "
            f"header n={n} d={d}"
        )
    matrix = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, d)
    return np.array(matrix)  # own the memory; frombuffer views are read-only


def read_dataset(meta_path: str | Path, matrix_path: str | Path) -> EmbeddingDataset:
    """Read a metadata CSV + EMB1 pair and return a validated dataset."""
    records: list[MetadataRecord] = []
    with Path(meta_path).open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValidationError(f"{meta_path}: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValidationError(f"{meta_path}:{lineno}: expected 4 fields, got {len(row)}")
            image_id, individual_id, species, split_hint = row
            records.append(
                MetadataRecord(
                    image_id=image_id,
                    individual_id=individual_id or None,
                    species=species,
                    split_hint=split_hint or None,
                )
            )

    matrix = read_matrix(matrix_path)
    if matrix.shape[0] != len(records):
        raise ValidationError(
            f"row count mismatch: CSV has {len(records)} rows, "
            f"binary header says n={matrix.shape[0]}"
        )
    dataset = EmbeddingDataset(records=records, matrix=matrix)
    validate_dataset(dataset)
    return dataset


def subset(dataset: EmbeddingDataset, row_indices: np.ndarray | list[int]) -> EmbeddingDataset:
    """Dataset restricted to the given rows, preserving order."""
    idx = np.asarray(row_indices, dtype=int)
    return EmbeddingDataset(
        records=[dataset.records[i] for i in idx],
        matrix=dataset.matrix[idx],
    )
