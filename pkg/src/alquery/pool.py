"""Pool data model, annotation bookkeeping and holdout splitting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable, Mapping, Sequence

import numpy as np

from alquery.errors import ConfigurationError, DataError, ShapeError, StateError


@dataclass(frozen=True, eq=False)
class SamplePool:
    """Immutable embedding matrix with optional per-sample labels and groups.

    Samples are addressed by dense row indices; ``sample_ids`` carries the
    stable identifiers used in files and logs.
    """

    embeddings: np.ndarray
    labels: np.ndarray | None = None
    groups: np.ndarray | None = None
    sample_ids: tuple[Hashable, ...] = ()
    meta: Mapping[str, Any] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.embeddings.shape[0]

    @property
    def n_lat(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return self.n_samples

    def group_members(self) -> dict[Hashable, np.ndarray]:
        """Map each group id to the sorted row indices of its members."""
        if self.groups is None:
            raise ConfigurationError("pool has no group assignments")
        members: dict[Hashable, list[int]] = {}
        for i, g in enumerate(self.groups.tolist()):
            members.setdefault(g, []).append(i)
        return {g: np.asarray(idx, dtype=np.intp) for g, idx in sorted(members.items(), key=lambda kv: kv[1][0])}

    def indices_of(self, ids: Iterable[Hashable]) -> list[int]:
        """Translate stable sample ids into row indices."""
        lookup = {sid: i for i, sid in enumerate(self.sample_ids)}
        out = []
        for sid in ids:
            if sid not in lookup:
                # ids read from text files arrive as strings
                alt = _coerce_id(sid)
                if alt not in lookup:
                    raise DataError(f"unknown sample id {sid!r}")
                sid = alt
            out.append(lookup[sid])
        return out

    def ids_of(self, indices: Iterable[int]) -> list[Hashable]:
        return [self.sample_ids[i] for i in indices]

    def subset(self, indices: Sequence[int]) -> SamplePool:
        """Return a new pool holding only ``indices`` (ids are preserved)."""
        idx = np.asarray(indices, dtype=np.intp)
        return create_pool(
            self.embeddings[idx],
            labels=None if self.labels is None else self.labels[idx],
            groups=None if self.groups is None else self.groups[idx],
            sample_ids=[self.sample_ids[i] for i in idx],
            meta=dict(self.meta),
        )


def _coerce_id(sid: Hashable) -> Hashable:
    if isinstance(sid, str):
        try:
            return int(sid)
        except ValueError:
            return sid
    return str(sid)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def create_pool(
    embeddings,
    labels=None,
    groups=None,
    sample_ids: Sequence[Hashable] | None = None,
    meta: Mapping[str, Any] | None = None,
) -> SamplePool:
    """Validate inputs and build a :class:`SamplePool`.

    Args:
        embeddings: ``[n_samples, n_lat]`` real matrix.
        labels: optional class id per sample.
        groups: optional group (volume) id per sample.
        sample_ids: stable identifiers; defaults to ``0..n-1``.
        meta: free-form metadata (e.g. class priors from the generator).

    Raises:
        ShapeError: the matrix is not 2-D with ``n_lat >= 1`` or a column
            length disagrees with the row count.
        DataError: non-finite entries or duplicate ids.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"embeddings must be a 2-D matrix with at least one column, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("embeddings contain non-finite values")
    n = x.shape[0]

    def column(values, name):
        if values is None:
            return None
        arr = np.asarray(values)
        if arr.ndim != 1 or arr.shape[0] != n:
            raise ShapeError(f"{name} has length {arr.shape[0] if arr.ndim else 0}, expected {n}")
        return _readonly(arr)

    lab = column(labels, "labels")
    grp = column(groups, "groups")
    if sample_ids is None:
        ids: tuple[Hashable, ...] = tuple(range(n))
    else:
        ids = tuple(sample_ids)
        if len(ids) != n:
            raise ShapeError(f"sample_ids has length {len(ids)}, expected {n}")
        if len(set(ids)) != n:
            raise DataError("sample_ids are not unique")
    return SamplePool(_readonly(x), lab, grp, ids, dict(meta or {}))


@dataclass(frozen=True)
class QueryBatch:
    """Row indices selected at one iteration, in selection order."""

    iteration: int
    selected: tuple[int, ...]
    scores: Mapping[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.selected)


@dataclass(frozen=True)
class AnnotationState:
    """Partition of pool indices into annotated and non-annotated sets."""

    annotated: tuple[int, ...]
    non_annotated: frozenset[int]
    iteration: int = 0

    @classmethod
    def initial(cls, n_samples: int, annotated: Iterable[int]) -> AnnotationState:
        ann = tuple(int(i) for i in annotated)
        if len(set(ann)) != len(ann):
            raise StateError("initial annotated set contains duplicates")
        if any(i < 0 or i >= n_samples for i in ann):
            raise StateError("initial annotated index out of range")
        return cls(ann, frozenset(range(n_samples)) - set(ann), 0)

    @property
    def n_samples(self) -> int:
        return len(self.annotated) + len(self.non_annotated)

    def annotated_array(self) -> np.ndarray:
        return np.asarray(self.annotated, dtype=np.intp)

    def non_annotated_array(self) -> np.ndarray:
        """Non-annotated indices in ascending order."""
        return np.asarray(sorted(self.non_annotated), dtype=np.intp)


def annotate(state: AnnotationState, batch: QueryBatch | Iterable[int]) -> AnnotationState:
    """Move ``batch`` from the non-annotated to the annotated set.

    Prior annotation order is preserved and the iteration counter advances
    by one even for an empty batch.

    Raises:
        StateError: an index is already annotated, unknown, or repeated.
    """
    selected = batch.selected if isinstance(batch, QueryBatch) else tuple(batch)
    selected = tuple(int(i) for i in selected)
    if len(set(selected)) != len(selected):
        raise StateError("batch contains duplicate indices")
    for i in selected:
        if i not in state.non_annotated:
            raise StateError(f"index {i} is not in the non-annotated set")
    return AnnotationState(
        state.annotated + selected,
        state.non_annotated.difference(selected),
        state.iteration + 1,
    )


@dataclass(frozen=True)
class HoldoutSplit:
    pool_ids: tuple[Hashable, ...]
    validation_ids: tuple[Hashable, ...]
    test_ids: tuple[Hashable, ...]
    seed: int


def _largest_remainder(n_units: int, ratios: Sequence[float]) -> list[int]:
    quotas = [round(r * n_units, 9) for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    # stable sort: equal remainders go to the earlier split
    order = sorted(range(len(ratios)), key=lambda i: -remainders[i])
    for i in order[: n_units - sum(counts)]:
        counts[i] += 1
    return counts


def split_holdout(pool: SamplePool, ratios: Sequence[float] = (0.70, 0.05, 0.25), seed: int = 0) -> HoldoutSplit:
    """Deterministic pool/validation/test split that keeps groups intact.

    Groups (or single samples, for ungrouped pools) are shuffled with
    ``seed`` and allocated by largest-remainder rounding of the ratios.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    if pool.groups is not None:
        units = [pool.ids_of(m) for m in pool.group_members().values()]
    else:
        units = [[sid] for sid in pool.sample_ids]
    if len(units) < len(ratios):
        raise ConfigurationError(f"cannot split {len(units)} groups into {len(ratios)} sets")
    order = np.random.default_rng(seed).permutation(len(units))
    counts = _largest_remainder(len(units), ratios)
    parts: list[tuple[Hashable, ...]] = []
    start = 0
    for c in counts:
        chosen = order[start : start + c]
        start += c
        parts.append(tuple(sid for u in sorted(chosen) for sid in units[u]))
    return HoldoutSplit(parts[0], parts[1], parts[2], seed)
