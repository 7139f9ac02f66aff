"""Writers for the canonical metadata CSV + EMB1 embedding pair.

These mirror the downstream consumer's on-disk contract: an RFC-4180 CSV
with header ``image_id,individual_id,species,split_hint`` (empty cell for
an absent individual_id), and the EMB1 binary layout:

    bytes 0-3   magic "EMB1"
    byte  4     version 0x01
    uint32 LE   n rows
    uint32 LE   d columns
    n*d float32 LE, row-major
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<4sBII")
_MAGIC = b"EMB1"
_VERSION = 1


@dataclass(frozen=True)
class ManifestRow:
    image_id: str
    individual_id: str | None
    species: str
    path: Path


def read_manifest(path: str | Path, image_root: str | Path | None = None) -> list[ManifestRow]:
    """Parse the input manifest CSV.

    Required columns: image_id, individual_id (may be empty), species.
    An optional ``path`` column locates the image file; when absent the
    image_id itself is treated as a filename under ``image_root``.
    """
    root = Path(image_root) if image_root is not None else Path(".")
    rows: list[ManifestRow] = []
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"image_id", "individual_id", "species"}
        missing = required - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: manifest missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            image_id = row["image_id"]
            if not image_id:
                raise ValueError(f"{path}:{lineno}: empty image_id")
            if not row["species"]:
                raise ValueError(f"{path}:{lineno}: empty species")
            rel = row.get("path") or image_id
            rows.append(
                ManifestRow(
                    image_id=image_id,
                    individual_id=row["individual_id"] or None,
                    species=row["species"],
                    path=root / rel,
                )
            )
    return rows


def write_metadata_csv(path: str | Path, rows: list[ManifestRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "individual_id", "species", "split_hint"])
        for row in rows:
            writer.writerow([row.image_id, row.individual_id or "", row.species, ""])


def write_emb1(path: str | Path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError(f"embedding matrix must be 2-d, got shape {matrix.shape}")
    n, d = matrix.shape
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, n, d))
        fh.write(matrix.tobytes())
