"""Linear stand-ins for a trained latent encoder.

The selection math only consumes a latent matrix, so any encoder works; a
learned encoder's output can be supplied as a matrix CSV instead.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np

from alquery.errors import ConfigurationError, DataError, ShapeError


class ZeroVarianceWarning(UserWarning):
    """Requested components carry (numerically) zero variance."""


@dataclass(frozen=True, eq=False)
class LinearEncoder:
    projection: np.ndarray  # [d_in, n_lat]
    offset: np.ndarray  # [d_in]
    kind: Literal["pca", "random_projection"]
    explained_variance: np.ndarray | None = None
    explained_variance_ratio: np.ndarray | None = None

    @property
    def d_in(self) -> int:
        return self.projection.shape[0]

    @property
    def n_lat(self) -> int:
        return self.projection.shape[1]


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("matrix contains non-finite values")
    return x


def _covariance(x: np.ndarray, mean: np.ndarray, chunk: int = 4096) -> np.ndarray:
    # chunked so that large image matrices are never centered in one copy
    d = x.shape[1]
    cov = np.zeros((d, d))
    for start in range(0, x.shape[0], chunk):
        block = x[start : start + chunk] - mean
        cov += block.T @ block
    return cov / (x.shape[0] - 1)


def fit_pca(matrix, n_lat: int) -> LinearEncoder:
    """Fit a PCA encoder by eigendecomposition of the sample covariance.

    Components are ordered by non-increasing explained variance, with the
    sign fixed so the largest-magnitude loading of each is positive.
    Requesting more components than the data rank pads with zero-variance
    directions and emits :class:`ZeroVarianceWarning`.
    """
    x = _as_matrix(matrix)
    n, d = x.shape
    if n_lat < 1 or n_lat > min(n - 1, d):
        raise ConfigurationError(f"n_lat={n_lat} must lie in [1, min(rows-1, cols)={min(n - 1, d)}]")
    mean = x.mean(axis=0)
    cov = _covariance(x, mean)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    pivots = np.argmax(np.abs(evecs), axis=0)
    evecs = evecs * np.sign(evecs[pivots, np.arange(d)])

    total = evals.sum()
    tol = max(total, 1.0) * d * np.finfo(float).eps * 10
    if np.any(evals[:n_lat] <= tol):
        warnings.warn(
            f"{int(np.sum(evals[:n_lat] <= tol))} of {n_lat} components have zero variance",
            ZeroVarianceWarning,
            stacklevel=2,
        )
    ratio = evals / total if total > tol else np.zeros_like(evals)
    return LinearEncoder(
        projection=evecs[:, :n_lat].copy(),
        offset=mean,
        kind="pca",
        explained_variance=evals[:n_lat].copy(),
        explained_variance_ratio=ratio[:n_lat].copy(),
    )


def fit_random_projection(matrix, n_lat: int, seed: int = 0) -> LinearEncoder:
    """Gaussian random projection with entries ~ N(0, 1/n_lat), centered on the data mean."""
    x = _as_matrix(matrix)
    d = x.shape[1]
    if n_lat < 1 or n_lat > d:
        raise ConfigurationError(f"n_lat={n_lat} must lie in [1, {d}]")
    rng = np.random.default_rng(seed)
    proj = rng.normal(0.0, 1.0 / np.sqrt(n_lat), size=(d, n_lat))
    return LinearEncoder(projection=proj, offset=x.mean(axis=0), kind="random_projection")


def encode(encoder: LinearEncoder, matrix) -> np.ndarray:
    x = _as_matrix(matrix)
    if x.shape[1] != encoder.d_in:
        raise ShapeError(f"encoder expects {encoder.d_in} input columns, got {x.shape[1]}")
    return (x - encoder.offset) @ encoder.projection


def decode(encoder: LinearEncoder, embeddings) -> np.ndarray:
    """Map embeddings back to input space (exact inverse only for a full PCA basis)."""
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != encoder.n_lat:
        raise ShapeError(f"expected [n, {encoder.n_lat}] embeddings, got {z.shape}")
    return z @ encoder.projection.T + encoder.offset
