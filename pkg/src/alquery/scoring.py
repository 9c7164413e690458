"""Uncertainty from Monte-Carlo prediction stacks and set-cover representativeness."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from alquery.errors import ConfigurationError, DataError, NumericError, ShapeError

# relative slack for treating two objective values as tied
TIE_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class PredictionStack:
    """Per-pixel label probabilities from ``n_mc`` stochastic forward passes.

    ``values`` has shape ``[n_mc, n_pixels, n_labels]``.
    """

    values: np.ndarray
    sample_id: Hashable = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ShapeError(f"prediction stack must be [n_mc, N, n_labels], got shape {v.shape}")
        if not np.all((v >= 0.0) & (v <= 1.0)):
            raise DataError("prediction stack values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def n_mc(self) -> int:
        return self.values.shape[0]

    @property
    def n_labels(self) -> int:
        return self.values.shape[2]

    def binarized(self) -> PredictionStack:
        """One-hot hard label maps (argmax per draw and pixel, lowest label on ties)."""
        hard = np.argmax(self.values, axis=2)
        onehot = np.zeros_like(self.values)
        np.put_along_axis(onehot, hard[..., None], 1.0, axis=2)
        return PredictionStack(onehot, self.sample_id)


def label_uncertainty(stack: PredictionStack, label: int) -> float:
    """Spatial mean of the per-pixel population variance across MC draws."""
    if stack.n_mc < 2:
        raise ConfigurationError("uncertainty needs at least two MC draws")
    if not 0 <= label < stack.n_labels:
        raise ConfigurationError(f"label {label} out of range for {stack.n_labels} labels")
    draws = stack.values[:, :, label]
    var = np.var(draws, axis=0)
    # the mean of equal floats is not always exact; constant pixels are exactly 0
    var[np.all(draws == draws[0], axis=0)] = 0.0
    return float(var.mean())


def multiclass_uncertainty(per_label: Sequence[float]) -> float:
    v = np.asarray(per_label, dtype=np.float64)
    if v.size == 0:
        raise ConfigurationError("no per-label uncertainties to average")
    return float(v.mean())


def stack_uncertainty(stack: PredictionStack, binarize: bool = False) -> float:
    """Equal-weight mean of :func:`label_uncertainty` over all labels."""
    if binarize:
        stack = stack.binarized()
    return multiclass_uncertainty([label_uncertainty(stack, lab) for lab in range(stack.n_labels)])


def top_k_uncertain(scores: Sequence[float], k: int) -> list[int]:
    """Positions of the ``k`` largest scores, descending, ties by ascending position."""
    s = np.asarray(scores, dtype=np.float64)
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    order = np.lexsort((np.arange(s.size), -s))
    return order[: min(k, s.size)].tolist()


def image_descriptor(features) -> np.ndarray:
    """Global average pooling of an ``[H, W, C]`` activation tensor."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3 or min(f.shape) < 1:
        raise ShapeError(f"expected a non-empty [H, W, C] tensor, got shape {f.shape}")
    return f.mean(axis=(0, 1))


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("descriptor lengths differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericError("cosine similarity undefined for a zero-norm descriptor")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError("cosine similarity undefined for a zero-norm descriptor")
    return x / norms


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ShapeError("descriptor lengths differ")
    return np.clip(_unit_rows(a) @ _unit_rows(b).T, -1.0, 1.0)


def greedy_set_cover(candidates, universe, n_rep: int) -> list[int]:
    """Greedy maximum set cover under cosine similarity.

    Repeatedly adds the candidate maximizing
    ``F(S) = sum_i max_{x in S} cos(universe_i, x)``.

    Args:
        candidates: ``[m, d]`` descriptor matrix, or a sequence of ``[k_j, d]``
            blocks when each candidate is a group of samples (all members join
            ``S`` together).
        universe: ``[u, d]`` descriptors of the set to cover.
        n_rep: number of candidates to select (clamped to ``m``).

    Returns:
        Candidate positions in selection order.
    """
    universe = np.atleast_2d(np.asarray(universe, dtype=np.float64))
    if isinstance(candidates, np.ndarray) and candidates.ndim == 2:
        blocks = [candidates[j : j + 1] for j in range(candidates.shape[0])]
    else:
        blocks = [np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in candidates]
    if not blocks:
        raise ConfigurationError("greedy set cover needs at least one candidate")
    if n_rep < 1:
        raise ConfigurationError("n_rep must be >= 1")
    # coverage[j, i]: best similarity of universe element i to candidate j
    coverage = np.stack([cosine_matrix(universe, b).max(axis=1) for b in blocks])
    current = np.full(universe.shape[0], -np.inf)
    remaining = np.ones(len(blocks), dtype=bool)
    picked: list[int] = []
    for _ in range(min(n_rep, len(blocks))):
        gains = np.maximum(coverage, current).sum(axis=1)
        gains[~remaining] = -np.inf
        best = gains.max()
        j = int(np.flatnonzero(gains >= best - TIE_RTOL * max(1.0, abs(best)))[0])
        picked.append(j)
        remaining[j] = False
        current = np.maximum(current, coverage[j])
    return picked


def coverage_objective(selected_blocks, universe) -> float:
    """``F(S)`` for an explicit selection; 0 for the empty set."""
    universe = np.atleast_2d(np.asarray(universe, dtype=np.float64))
    blocks = [np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in selected_blocks]
    if not blocks:
        return 0.0
    return float(cosine_matrix(universe, np.vstack(blocks)).max(axis=1).sum())
