"""Bayesian sample querying in a latent space.

Candidates are ranked by how much more likely their embedding is under a
diagonal Gaussian fitted to the whole pool than under one fitted to the
annotated set. Per-dimension likelihoods are two-sided Gaussian tail
masses, ``1 + erf(-|z - mu| / (sigma * sqrt(2)))``, combined across
dimensions by product (a sum of logs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np
from scipy.special import erfc, log_ndtr

from alquery.errors import ConfigurationError, InsufficientDataError, NumericError, ShapeError

STD_FLOOR = 1e-6
LOG2 = math.log(2.0)


@dataclass(frozen=True, eq=False)
class DiagGaussian:
    mean: np.ndarray
    std: np.ndarray
    n_fit: int
    degenerate: bool = False

    @property
    def n_lat(self) -> int:
        return self.mean.shape[0]


def fit_diag_gaussian(embeddings, floor: float = STD_FLOOR) -> DiagGaussian:
    """Per-dimension mean and population std, with std floored at ``floor``.

    ``degenerate`` is set when any dimension hit the floor.

    Raises:
        InsufficientDataError: fewer than two rows.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected [m, n_lat] embeddings, got shape {x.shape}")
    if x.shape[0] < 2:
        raise InsufficientDataError(f"need at least 2 samples to fit a Gaussian, got {x.shape[0]}")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    degenerate = bool(np.any(std < floor))
    return DiagGaussian(mean, np.maximum(std, floor), x.shape[0], degenerate)


def erf_tail_likelihood(z, mean, std):
    """``1 + erf(-|z - mean| / (std * sqrt(2)))``: twice the Gaussian tail mass beyond ``z``.

    Works elementwise on arrays; returns a float for scalar input.
    """
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise NumericError("std must be strictly positive")
    out = erfc(np.abs(np.asarray(z, dtype=np.float64) - mean) / (std * math.sqrt(2.0)))
    return float(out) if np.ndim(out) == 0 else out


def log_erf_tail_likelihood(z, mean, std):
    """Log of :func:`erf_tail_likelihood`, stable far into the tails."""
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise NumericError("std must be strictly positive")
    # 1 + erf(-d/sqrt2) = 2 * Phi(-d)
    out = LOG2 + log_ndtr(-np.abs(np.asarray(z, dtype=np.float64) - mean) / std)
    return float(out) if np.ndim(out) == 0 else out


def _check_dims(n: int, *gaussians: DiagGaussian) -> None:
    for g in gaussians:
        if g.n_lat != n:
            raise ShapeError(f"embedding has {n} dimensions, Gaussian has {g.n_lat}")


def bsq_terms(embeddings, g_pool: DiagGaussian, g_an: DiagGaussian) -> np.ndarray:
    """Per-dimension log-likelihood ratios, shape ``[m, n_lat]``."""
    z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    _check_dims(z.shape[1], g_pool, g_an)
    return log_erf_tail_likelihood(z, g_pool.mean, g_pool.std) - log_erf_tail_likelihood(z, g_an.mean, g_an.std)


def bsq_scores(embeddings, g_pool: DiagGaussian, g_an: DiagGaussian) -> np.ndarray:
    """Log-likelihood ratio for every row of ``embeddings``."""
    return bsq_terms(embeddings, g_pool, g_an).sum(axis=1)


def bsq_log_ratio(z, g_pool: DiagGaussian, g_an: DiagGaussian) -> float:
    """Score of a single embedding vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError("expected a single embedding vector")
    return float(bsq_scores(z[None, :], g_pool, g_an)[0])


def _reduce_segments(values: np.ndarray, starts: np.ndarray, sizes: np.ndarray, how: str) -> np.ndarray:
    if how == "mean":
        return np.add.reduceat(values, starts) / sizes
    if how == "max":
        return np.maximum.reduceat(values, starts)
    if how == "sum":
        return np.add.reduceat(values, starts)
    raise ConfigurationError(f"unknown reduction {how!r}")


def _ranked(scores: np.ndarray) -> np.ndarray:
    return np.lexsort((np.arange(scores.size), -scores))


def select_bsq(
    s_unc: Sequence[int],
    embeddings,
    g_pool: DiagGaussian,
    g_an: DiagGaussian,
    n_rep: int,
    mode: Literal["one_shot", "sequential_refit"] = "one_shot",
    annotated=None,
    members: Mapping[int, Sequence[int]] | None = None,
    reduce: str = "mean",
) -> list[int]:
    """Pick ``n_rep`` entries of ``s_unc`` with the highest log-likelihood ratio.

    Args:
        s_unc: candidate keys. Row indices into ``embeddings``, or group keys
            when ``members`` is given.
        embeddings: full ``[n, n_lat]`` latent matrix.
        g_pool: Gaussian fitted to the whole pool.
        g_an: Gaussian fitted to the current annotated set.
        n_rep: how many candidates to return (clamped to ``len(s_unc)``).
        mode: ``one_shot`` ranks once. ``sequential_refit`` picks one at a
            time and refits the annotated Gaussian with each pick appended,
            so later picks avoid regions already covered by the batch.
        annotated: ``[m, n_lat]`` annotated embeddings; required for
            ``sequential_refit``.
        members: optional map from group key to member row indices; a
            group's score is the ``reduce`` of its members' scores.
        reduce: ``mean``, ``max`` or ``sum``.

    Returns:
        Selected candidate keys in selection order; ties go to the earlier
        position in ``s_unc``.
    """
    keys = list(s_unc)
    if not keys:
        raise ConfigurationError("select_bsq needs at least one candidate")
    if n_rep < 1:
        raise ConfigurationError("n_rep must be >= 1")
    z = np.asarray(embeddings, dtype=np.float64)
    rows = [np.atleast_1d(np.asarray(members[k] if members is not None else k, dtype=np.intp)) for k in keys]
    n_pick = min(n_rep, len(keys))
    sizes = np.array([r.size for r in rows])
    if np.any(sizes == 0):
        raise ConfigurationError("every candidate group needs at least one member")
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    flat = z[np.concatenate(rows)]
    _check_dims(flat.shape[1], g_pool, g_an)
    pool_ll = log_erf_tail_likelihood(flat, g_pool.mean, g_pool.std).sum(axis=1)

    def candidate_scores(g: DiagGaussian) -> np.ndarray:
        per_row = pool_ll - log_erf_tail_likelihood(flat, g.mean, g.std).sum(axis=1)
        if members is None:
            return per_row
        return _reduce_segments(per_row, starts, sizes, reduce)

    if mode == "one_shot":
        order = _ranked(candidate_scores(g_an))
        return [keys[j] for j in order[:n_pick]]
    if mode != "sequential_refit":
        raise ConfigurationError(f"unknown select_bsq mode {mode!r}")
    if annotated is None:
        raise ConfigurationError("sequential_refit needs the annotated embeddings")
    ann = np.atleast_2d(np.asarray(annotated, dtype=np.float64))
    remaining = np.ones(len(keys), dtype=bool)
    picked: list[int] = []
    g = g_an
    for _ in range(n_pick):
        scores = candidate_scores(g)
        scores[~remaining] = -np.inf
        j = int(_ranked(scores)[0])
        picked.append(j)
        remaining[j] = False
        ann = np.vstack([ann, z[rows[j]]])
        g = fit_diag_gaussian(ann)
    return [keys[j] for j in picked]


def gaussian_product(components: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Mean and std of the (renormalized) product of scalar Gaussians.

    Precisions add; the mean is the precision-weighted mean.
    """
    comps = list(components)
    if not comps:
        raise ConfigurationError("gaussian_product needs at least one component")
    mu = np.array([c[0] for c in comps], dtype=np.float64)
    sd = np.array([c[1] for c in comps], dtype=np.float64)
    if np.any(sd <= 0):
        raise NumericError("component std must be strictly positive")
    prec = 1.0 / sd**2
    var = 1.0 / prec.sum()
    return float(var * (mu * prec).sum()), float(math.sqrt(var))


def product_summary(g: DiagGaussian) -> tuple[float, float]:
    """Collapse a diagonal Gaussian to one dimension for plotting."""
    return gaussian_product(list(zip(g.mean.tolist(), g.std.tolist())))


# -- maximum mean discrepancy -------------------------------------------------------


def kernel_mean(
    x,
    y,
    bandwidth: float = 1.0,
    kernel: Literal["gaussian", "unsquared"] = "gaussian",
    chunk: int = 1024,
) -> float:
    """Mean of ``k(x_i, y_j)`` over all pairs, diagonal included.

    ``gaussian``: ``exp(-||x - y||^2 / (2 s^2))``; ``unsquared`` drops the
    square on the norm.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ConfigurationError("kernel mean of an empty set")
    if bandwidth <= 0:
        raise ConfigurationError("bandwidth must be positive")
    if kernel not in ("gaussian", "unsquared"):
        raise ConfigurationError(f"unknown kernel {kernel!r}")
    y_sq = (y**2).sum(axis=1)
    total = 0.0
    for start in range(0, x.shape[0], chunk):
        xb = x[start : start + chunk]
        d2 = (xb**2).sum(axis=1)[:, None] + y_sq[None, :] - 2.0 * xb @ y.T
        np.maximum(d2, 0.0, out=d2)
        arg = d2 if kernel == "gaussian" else np.sqrt(d2)
        total += np.exp(-arg / (2.0 * bandwidth**2)).sum()
    return total / (x.shape[0] * y.shape[0])


def mmd(x, y, bandwidth: float = 1.0, kernel: Literal["gaussian", "unsquared"] = "gaussian") -> float:
    """Biased (V-statistic) maximum mean discrepancy between two sample sets."""
    value = kernel_mean(x, x, bandwidth, kernel) + kernel_mean(y, y, bandwidth, kernel) - 2.0 * kernel_mean(
        x, y, bandwidth, kernel
    )
    # cancellation can leave tiny negatives for near-identical sets
    return max(value, 0.0)
