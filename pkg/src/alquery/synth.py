"""Synthetic labelled pools and imbalanced initial draws."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from alquery.errors import ConfigurationError
from alquery.pool import SamplePool, create_pool


def synth_clusters(
    n_classes: int,
    per_class: int,
    dims: int,
    class_priors: Sequence[float] | None = None,
    seed: int = 0,
    separation: float = 0.5,
) -> SamplePool:
    """Gaussian class blobs whose mixture is close to a standard normal.

    Class centers are drawn from ``N(0, separation^2 I)`` and within-class
    noise has std ``sqrt(1 - separation^2)``, so the pooled latent matches
    the standard-normal prior a regularized encoder aims for. Each class
    gets exactly ``per_class`` samples; ``class_priors`` are not used to
    draw the pool but stored in ``pool.meta`` for :func:`draw_initial`.

    Raises:
        ConfigurationError: non-positive counts, ``separation`` outside
            [0, 1), or priors that are negative, mis-sized or sum to zero.
    """
    if n_classes < 1 or per_class < 1 or dims < 1:
        raise ConfigurationError("n_classes, per_class and dims must all be >= 1")
    if not 0.0 <= separation < 1.0:
        raise ConfigurationError("separation must lie in [0, 1)")
    priors = _check_priors(np.ones(n_classes) if class_priors is None else class_priors, n_classes)

    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, separation, size=(n_classes, dims))
    noise = rng.normal(0.0, np.sqrt(1.0 - separation**2), size=(n_classes * per_class, dims))
    labels = np.repeat(np.arange(n_classes), per_class)
    x = centers[labels] + noise
    return create_pool(
        x,
        labels=labels,
        meta={"class_priors": priors.tolist(), "generator": "synth_clusters", "seed": seed, "separation": separation},
    )


def _check_priors(priors, n_classes: int) -> np.ndarray:
    p = np.asarray(priors, dtype=np.float64)
    if p.shape != (n_classes,):
        raise ConfigurationError(f"expected {n_classes} class priors, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ConfigurationError("class priors must be finite and non-negative")
    if p.sum() <= 0:
        raise ConfigurationError("class priors sum to zero")
    return p


def imbalanced_priors(
    n_classes: int, n_reduced: int = 3, factor: float = 10.0, seed: int | np.random.Generator = 0
) -> np.ndarray:
    """Uniform priors with ``n_reduced`` randomly chosen classes divided by ``factor``."""
    if not 0 <= n_reduced <= n_classes:
        raise ConfigurationError("n_reduced must lie in [0, n_classes]")
    rng = np.random.default_rng(seed)
    p = np.ones(n_classes)
    p[rng.choice(n_classes, size=n_reduced, replace=False)] /= factor
    return p


def draw_initial(
    pool: SamplePool,
    n_init: int,
    seed: int | np.random.Generator = 0,
    class_priors: Sequence[float] | None = None,
) -> list[int]:
    """Draw ``n_init`` distinct row indices with probability proportional to the class prior.

    Without priors (neither given nor stored in ``pool.meta``) the draw is
    uniform. Labels must be integer class ids ``0..C-1`` when priors apply.
    """
    if n_init < 1 or n_init > pool.n_samples:
        raise ConfigurationError(f"n_init must lie in [1, {pool.n_samples}]")
    rng = np.random.default_rng(seed)
    if class_priors is None:
        class_priors = pool.meta.get("class_priors")
    if class_priors is None:
        return sorted(rng.choice(pool.n_samples, size=n_init, replace=False).tolist())
    if pool.labels is None:
        raise ConfigurationError("class priors need a labelled pool")
    labels = pool.labels.astype(np.intp)
    priors = _check_priors(class_priors, int(labels.max()) + 1)
    w = priors[labels]
    if np.count_nonzero(w) < n_init:
        raise ConfigurationError("not enough samples with non-zero prior for the initial draw")
    return sorted(rng.choice(pool.n_samples, size=n_init, replace=False, p=w / w.sum()).tolist())
