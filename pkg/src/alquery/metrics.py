"""Segmentation metrics (Dice, mean surface distance) and class-proportion entropy."""

from __future__ import annotations

import math
from collections import Counter
from typing import Hashable, Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from alquery.errors import ConfigurationError, DataError, ShapeError

_CUBE = np.ones((3, 3, 3), dtype=bool)


def _mask(m) -> np.ndarray:
    a = np.asarray(m)
    if a.dtype != bool:
        if not np.all((a == 0) | (a == 1)):
            raise DataError("binary masks may only contain 0 and 1")
        a = a.astype(bool)
    return a


def dice(m_s, m_g) -> float:
    """Dice overlap ``2|S & G| / (|S| + |G|)``.

    Returns ``nan`` when both masks are empty (no foreground to score).
    """
    s, g = _mask(m_s), _mask(m_g)
    if s.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {s.shape} vs {g.shape}")
    denom = int(s.sum()) + int(g.sum())
    if denom == 0:
        return math.nan
    return 2.0 * int(np.logical_and(s, g).sum()) / denom


def extract_contour(mask) -> np.ndarray:
    """Boolean contour mask: the mask minus its 3x3x3 erosion.

    Voxels outside the volume count as background, so foreground touching
    the volume border is always contour.
    """
    m = _mask(mask)
    if m.ndim != 3:
        raise ShapeError(f"expected a 3-D mask, got {m.ndim}-D")
    eroded = ndimage.binary_erosion(m, structure=_CUBE, border_value=0)
    return m & ~eroded


def contour_points(contour) -> np.ndarray:
    """Integer voxel coordinates ``[k, ndim]`` of a contour mask."""
    return np.argwhere(_mask(contour))


def _points(c, spacing) -> np.ndarray:
    a = np.asarray(c)
    pts = contour_points(a) if a.dtype == bool else np.atleast_2d(a.astype(np.float64))
    pts = pts.astype(np.float64)
    if spacing is not None:
        pts = pts * np.asarray(spacing, dtype=np.float64)
    return pts


def msd(c_s, c_g, spacing: Sequence[float] | None = None) -> float:
    """Symmetric mean surface distance between two contours.

    Contours are given as boolean masks or ``[k, 3]`` coordinate arrays.
    Distances are in voxel units unless a per-axis ``spacing`` is given.
    """
    ps, pg = _points(c_s, spacing), _points(c_g, spacing)
    if len(ps) == 0 or len(pg) == 0:
        raise ConfigurationError("surface distance is undefined for an empty contour")
    d_sg, _ = cKDTree(pg).query(ps)
    d_gs, _ = cKDTree(ps).query(pg)
    return float((d_sg.sum() + d_gs.sum()) / (len(ps) + len(pg)))


def class_entropy(labels: Iterable[Hashable], base: float = math.e) -> float:
    """Entropy of the empirical class proportions (nats by default)."""
    counts = np.array(list(Counter(np.asarray(list(labels)).tolist()).values()), dtype=np.float64)
    if counts.size == 0:
        raise ConfigurationError("entropy of an empty label multiset")
    p = counts / counts.sum()
    h = float(-(p * np.log(p)).sum())
    return h / math.log(base) if base != math.e else h


def label_scores(pred, truth, labels: Sequence[int], spacing=None) -> dict[str, float]:
    """Equal-weight Dice and MSD averaged over ``labels`` of two label volumes.

    Labels absent from both volumes are skipped for Dice; MSD is averaged
    only over labels whose contours exist in both volumes.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError("label volumes differ in shape")
    dices, dists = [], []
    for lab in labels:
        s, g = pred == lab, truth == lab
        d = dice(s, g)
        if not math.isnan(d):
            dices.append(d)
        if s.ndim == 3 and s.any() and g.any():
            dists.append(msd(extract_contour(s), extract_contour(g), spacing))
    return {
        "dice": float(np.mean(dices)) if dices else math.nan,
        "msd": float(np.mean(dists)) if dists else math.nan,
    }
