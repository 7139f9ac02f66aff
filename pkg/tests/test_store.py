"""Embedding store: EMB1 round-trips, header arithmetic, validation errors."""

from __future__ import annotations

import struct

import numpy as np
import pytest

from openreid.errors import ValidationError
from openreid.store import (
    EmbeddingDataset,
    MetadataRecord,
    read_dataset,
    write_dataset,
)
from conftest import make_dataset


def test_header_arithmetic(tmp_path):
    ds = make_dataset(np.arange(12, dtype=np.float32).reshape(3, 4), ["a", "a", "b"])
    meta, emb = tmp_path / "m.csv", tmp_path / "e.bin"
    write_dataset(ds, meta, emb)
    raw = emb.read_bytes()
    assert raw[:4] == b"EMB1"
    assert raw[4] == 1
    n, d = struct.unpack_from("<II", raw, 5)
    assert (n, d) == (3, 4)
    assert len(raw) == 13 + 48  # 3 * 4 * 4 payload bytes


def test_empty_dataset_round_trip(tmp_path):
    ds = EmbeddingDataset(records=[], matrix=np.zeros((0, 768), dtype=np.float32))
    write_dataset(ds, tmp_path / "m.csv", tmp_path / "e.bin")
    back = read_dataset(tmp_path / "m.csv", tmp_path / "e.bin")
    assert len(back) == 0
    assert back.dim == 768


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.Generator(np.random.PCG64(42))
    matrix = rng.normal(size=(100, 16)).astype(np.float32)
    ids = [f"a{i}" if i % 2 else f"b{i}" for i in range(100)]
    hints = ["database" if i % 3 else "query" for i in range(100)]
    ds = make_dataset(matrix, ids, split_hints=hints)
    write_dataset(ds, tmp_path / "m.csv", tmp_path / "e.bin")
    back = read_dataset(tmp_path / "m.csv", tmp_path / "e.bin")
    # oracle: compare raw byte buffers, not float equality
    assert back.matrix.astype("<f4").tobytes() == matrix.astype("<f4").tobytes()
    assert back.records == ds.records


def test_csv_quoting_round_trip(tmp_path):
    ds = make_dataset(np.ones((1, 2), dtype=np.float32), ['has,"comma"'])
    write_dataset(ds, tmp_path / "m.csv", tmp_path / "e.bin")
    back = read_dataset(tmp_path / "m.csv", tmp_path / "e.bin")
    assert back.records[0].individual_id == 'has,"comma"'


def test_absent_individual_id_round_trip(tmp_path):
    records = [MetadataRecord("q1", None, "lynx", "query")]
    ds = EmbeddingDataset(records=records, matrix=np.ones((1, 3), dtype=np.float32))
    write_dataset(ds, tmp_path / "m.csv", tmp_path / "e.bin")
    back = read_dataset(tmp_path / "m.csv", tmp_path / "e.bin")
    assert back.records[0].individual_id is None


def test_bad_magic(tmp_path):
    ds = make_dataset(np.ones((2, 2), dtype=np.float32), ["a", "b"])
    write_dataset(ds, tmp_path / "m.csv", tmp_path / "e.bin")
    raw = bytearray((tmp_path / "e.bin").read_bytes())
    raw[:4] = b"XEMB"
    (tmp_path / "e.bin").write_bytes(bytes(raw))
    with pytest.raises(ValidationError, match="bad magic"):
        read_dataset(tmp_path / "m.csv", tmp_path / "e.bin")


def test_row_count_mismatch(tmp_path):
    ds = make_dataset(np.ones((5, 2), dtype=np.float32), list("abcde"))
    write_dataset(ds, tmp_path / "m.csv", tmp_path / "e.bin")
    raw = bytearray((tmp_path / "e.bin").read_bytes())
    struct.pack_into("<I", raw, 5, 4)  # header claims n=4
    raw = raw[: 13 + 4 * 2 * 4]
    (tmp_path / "e.bin").write_bytes(bytes(raw))
    with pytest.raises(ValidationError, match="row count mismatch"):
        read_dataset(tmp_path / "m.csv", tmp_path / "e.bin")


def test_non_finite_rejected(tmp_path):
    matrix = np.ones((2, 2), dtype=np.float32)
    matrix[1, 0] = np.nan
    ds = make_dataset(matrix, ["a", "b"])
    with pytest.raises(ValidationError, match="non-finite"):
        write_dataset(ds, tmp_path / "m.csv", tmp_path / "e.bin")


def test_duplicate_image_id_rejected():
    records = [
        MetadataRecord("same", "a", "lynx"),
        MetadataRecord("same", "b", "lynx"),
    ]
    ds = EmbeddingDataset(records=records, matrix=np.ones((2, 2), dtype=np.float32))
    with pytest.raises(ValidationError, match="duplicate image_id"):
        ds.validate()


def test_empty_species_rejected():
    ds = EmbeddingDataset(
        records=[MetadataRecord("x", "a", "")],
        matrix=np.ones((1, 2), dtype=np.float32),
    )
    with pytest.raises(ValidationError, match="species"):
        ds.validate()
