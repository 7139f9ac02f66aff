"""PCA over standardized embeddings, for 2-D diagnostic projections.

Columns are shifted to zero mean and scaled to unit variance (sample
variance, ddof=1) before the rotation is fitted; near-constant columns
(variance < 1e-12) keep scale 1 so standardization never divides by zero.
Component signs are flipped so each component's largest-magnitude entry is
positive, making outputs deterministic across eigensolvers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

_ZERO_VARIANCE = 1e-12


@dataclass(frozen=True)
class PcaModel:
    """Fitted rotation: column mean/scale plus orthonormal component rows."""

    mean: np.ndarray  # (d,)
    scale: np.ndarray  # (d,) per-column std, 1 where variance ~ 0
    components: np.ndarray  # (k, d), rows orthonormal
    eigenvalues: np.ndarray  # (k,), descending, >= 0

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @property
    def n_components(self) -> int:
        return int(self.components.shape[0])


def fit_pca(matrix: np.ndarray, k: int) -> PcaModel:
    """Fit the top-k principal components of the standardized matrix.

    Uses an SVD of the standardized data; eigenvalues are the squared
    singular values divided by (n - 1).
    """
    X = np.asarray(matrix, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError(f"matrix must be 2-D, got shape {X.shape}")
    n, d = X.shape
    if n < 2:
        raise ValidationError(f"PCA needs at least 2 rows, got {n}")
    if not 1 <= k <= min(n - 1, d):
        raise ValidationError(f"k={k} out of range [1, {min(n - 1, d)}]")
    if not np.isfinite(X).all():
        raise ValidationError("matrix contains non-finite values")

    mean = X.mean(axis=0)
    var = X.var(axis=0, ddof=1)
    scale = np.where(var < _ZERO_VARIANCE, 1.0, np.sqrt(var))
    Z = (X - mean) / scale

    _, s, vt = np.linalg.svd(Z, full_matrices=False)
    eigenvalues = (s * s) / (n - 1)
    eigenvalues = np.clip(eigenvalues[:k], 0.0, None)
    components = vt[:k]

    # Deterministic sign: largest-magnitude entry of each component positive.
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0

    return PcaModel(mean=mean, scale=scale, components=components, eigenvalues=eigenvalues)


def project(model: PcaModel, matrix: np.ndarray) -> np.ndarray:
    """Standardize rows with the fitted mean/scale and rotate onto components."""
    X = np.asarray(matrix, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ValidationError(
            f"dimension mismatch: matrix has shape {X.shape}, model dim {model.dim}"
        )
    Z = (X - model.mean) / model.scale
    return Z @ model.components.T
