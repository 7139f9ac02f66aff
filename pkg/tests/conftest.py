"""Shared synthetic fixtures: clustered embedding datasets with species tags."""

from __future__ import annotations

import numpy as np
import pytest

from openreid.store import EmbeddingDataset, MetadataRecord


def make_dataset(matrix, individual_ids, species=None, split_hints=None) -> EmbeddingDataset:
    matrix = np.asarray(matrix, dtype=np.float32)
    n = matrix.shape[0]
    species = species or ["lynx"] * n
    records = [
        MetadataRecord(
            image_id=f"img{i:04d}",
            individual_id=individual_ids[i],
            species=species[i],
            split_hint=split_hints[i] if split_hints else None,
        )
        for i in range(n)
    ]
    return EmbeddingDataset(records=records, matrix=matrix)


def gaussian_clusters(
    n_individuals: int,
    images_per: int,
    dim: int,
    center_scale: float = 10.0,
    sigma: float = 0.05,
    seed: int = 0,
    n_species: int = 2,
    unknown_tail: int = 0,
    unknown_scale: float = 20.0,
):
    """Clustered dataset: individual i centered at scale * e_i (one-hot axis).

    The last `unknown_tail` individuals get a larger scale so their images sit
    farther from every other cluster (clean open-set structure). Returns
    (dataset, labels list).
    """
    assert n_individuals <= dim
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = []
    ids = []
    species = []
    for c in range(n_individuals):
        scale = unknown_scale if c >= n_individuals - unknown_tail else center_scale
        center = np.zeros(dim)
        center[c] = scale
        for _ in range(images_per):
            rows.append(center + sigma * rng.normal(size=dim))
            ids.append(f"ind{c:03d}")
            species.append(f"sp{c % n_species}")
    return make_dataset(np.array(rows), ids, species=species), ids


@pytest.fixture
def small_clustered():
    return gaussian_clusters(6, 5, 16, seed=7)
