"""Batch-mode active-learning simulation.

A run starts from an explicit initial annotated set, and at every iteration
asks a strategy for a batch, lets the oracle (the pool's stored labels)
annotate it, and logs class entropy, the fitted annotated-set Gaussian and
the MMD between annotated set and pool.

Uncertainty comes from a bootstrap k-nearest-neighbour proxy learner: each
of ``n_models`` resampled references casts a one-hot vote per query, and
the stacked votes play the role of Monte-Carlo dropout draws.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Hashable, Literal, Mapping, Sequence

import numpy as np

from alquery.bsq import fit_diag_gaussian, kernel_mean, select_bsq, bsq_scores, DiagGaussian
from alquery.errors import ConfigurationError, FormatError, StateError
from alquery.metrics import class_entropy, dice
from alquery.pool import AnnotationState, QueryBatch, SamplePool, annotate
from alquery.scoring import PredictionStack, greedy_set_cover, top_k_uncertain
from alquery.synth import draw_initial, imbalanced_priors, synth_clusters

SCHEMA_VERSION = 1
STRATEGIES = ("random", "uncertainty", "setcover", "bsq", "upperbound")
REDUCTIONS = ("mean", "max", "sum")


@dataclass(frozen=True)
class StrategyConfig:
    """Query strategy settings.

    ``n_unc=None`` skips the uncertainty pre-filter, so representativeness
    is scored over every non-annotated candidate.
    """

    kind: Literal["random", "uncertainty", "setcover", "bsq", "upperbound"] = "bsq"
    n_unc: int | None = 64
    n_rep: int = 32
    mode: Literal["sample", "group"] = "sample"
    bsq_mode: Literal["one_shot", "sequential_refit"] = "sequential_refit"
    reduce: Literal["mean", "max", "sum"] = "mean"
    seed: int = 0
    k: int = 5
    n_models: int = 17
    bandwidth: float = 1.0
    kernel: Literal["gaussian", "unsquared"] = "gaussian"

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.kind!r}; choose from {', '.join(STRATEGIES)}")
        if self.mode not in ("sample", "group"):
            raise ConfigurationError(f"unknown query mode {self.mode!r}")
        if self.bsq_mode not in ("one_shot", "sequential_refit"):
            raise ConfigurationError(f"unknown bsq mode {self.bsq_mode!r}")
        if self.reduce not in REDUCTIONS:
            raise ConfigurationError(f"unknown reduction {self.reduce!r}")
        if self.kernel not in ("gaussian", "unsquared"):
            raise ConfigurationError(f"unknown kernel {self.kernel!r}")
        if self.n_rep < 1 or self.k < 1 or self.n_models < 2:
            raise ConfigurationError("n_rep and k must be >= 1 and n_models >= 2")
        if self.n_unc is not None:
            if self.n_unc < 1:
                raise ConfigurationError("n_unc must be >= 1 (or None to disable)")
            if self.kind in ("setcover", "bsq") and self.n_rep > self.n_unc:
                raise ConfigurationError(f"n_rep={self.n_rep} exceeds n_unc={self.n_unc}")
        if self.bandwidth <= 0:
            raise ConfigurationError("bandwidth must be positive")

    @property
    def needs_uncertainty(self) -> bool:
        return self.kind == "uncertainty" or (self.kind in ("setcover", "bsq") and self.n_unc is not None)


def slice_defaults(**overrides) -> StrategyConfig:
    return StrategyConfig(**{"n_unc": 64, "n_rep": 32, "mode": "sample", **overrides})


def volume_defaults(**overrides) -> StrategyConfig:
    return StrategyConfig(**{"n_unc": 2, "n_rep": 1, "mode": "group", **overrides})


# -- proxy learner ---------------------------------------------------------------


def scoring_threads() -> int:
    """Worker cap from ``ALQUERY_THREADS`` (default 1)."""
    raw = os.environ.get("ALQUERY_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigurationError(f"ALQUERY_THREADS must be an integer, got {raw!r}") from None


@dataclass(frozen=True, eq=False)
class ProxyLearner:
    embeddings: np.ndarray
    labels: np.ndarray  # class positions into ``classes``
    classes: np.ndarray
    k: int
    n_models: int
    seed: int


def proxy_fit(embeddings, labels, k: int = 5, n_models: int = 17, seed: int = 0, classes=None) -> ProxyLearner:
    """Store a labelled reference set for bootstrap k-NN voting.

    ``classes`` fixes the label universe (and the label axis of predicted
    stacks); it defaults to the sorted distinct reference labels.
    """
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    y = np.asarray(labels)
    if x.shape[0] == 0:
        raise ConfigurationError("proxy learner needs a non-empty reference set")
    if y.shape != (x.shape[0],):
        raise ConfigurationError("one label per reference embedding required")
    if not 1 <= k <= x.shape[0]:
        raise ConfigurationError(f"k={k} must lie in [1, {x.shape[0]}]")
    if n_models < 1:
        raise ConfigurationError("n_models must be >= 1")
    classes = np.unique(y) if classes is None else np.asarray(classes)
    pos = np.searchsorted(classes, y)
    if np.any(pos >= classes.size) or np.any(classes[np.minimum(pos, classes.size - 1)] != y):
        raise ConfigurationError("reference labels outside the class universe")
    return ProxyLearner(x, pos.astype(np.intp), classes, k, n_models, seed)


def proxy_votes(learner: ProxyLearner, query) -> np.ndarray:
    """One-hot votes of every bootstrap model, shape ``[n_models, n_query, n_classes]``.

    Each model resamples the reference with replacement; neighbours at equal
    distance are ordered randomly, and vote ties go to the lowest class.
    """
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    ref = learner.embeddings
    n_ref, n_cls = ref.shape[0], learner.classes.size
    d2 = (q**2).sum(1)[:, None] + (ref**2).sum(1)[None, :] - 2.0 * q @ ref.T
    np.maximum(d2, 0.0, out=d2)
    seeds = np.random.SeedSequence(learner.seed).spawn(learner.n_models)

    def one_model(ss) -> np.ndarray:
        rng = np.random.default_rng(ss)
        boot = rng.integers(0, n_ref, size=n_ref)
        dd = d2[:, boot]
        k = min(learner.k, n_ref)
        nn = np.argsort(dd, axis=1, kind="stable")[:, :k]
        votes = learner.labels[boot][nn]
        counts = np.zeros((q.shape[0], n_cls), dtype=np.intp)
        np.add.at(counts, (np.arange(q.shape[0])[:, None], votes), 1)
        out = np.zeros((q.shape[0], n_cls))
        out[np.arange(q.shape[0]), np.argmax(counts, axis=1)] = 1.0
        return out

    workers = min(scoring_threads(), learner.n_models)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            models = list(ex.map(one_model, seeds))
    else:
        models = [one_model(ss) for ss in seeds]
    return np.stack(models)


def proxy_predict(learner: ProxyLearner, query, sample_ids: Sequence[Hashable] | None = None) -> list[PredictionStack]:
    """One single-pixel prediction stack per query row."""
    votes = proxy_votes(learner, query)
    ids = range(votes.shape[1]) if sample_ids is None else sample_ids
    return [PredictionStack(votes[:, i : i + 1, :], sample_id=sid) for i, sid in enumerate(ids)]


def vote_uncertainty(votes: np.ndarray) -> np.ndarray:
    """Mean-over-labels population variance across models, per query."""
    return votes.var(axis=0).mean(axis=-1)


# -- strategies ------------------------------------------------------------------


def group_aggregate(per_sample_scores, groups, reduce: str = "mean") -> dict[Hashable, float]:
    """Reduce per-sample scores to one score per group (first-appearance order)."""
    if groups is None:
        raise ConfigurationError("group aggregation needs group assignments")
    scores = np.asarray(per_sample_scores, dtype=np.float64)
    groups = np.asarray(groups)
    if groups.shape != scores.shape:
        raise ConfigurationError("every score needs exactly one group id")
    if reduce not in REDUCTIONS:
        raise ConfigurationError(f"unknown reduction {reduce!r}")
    buckets: dict[Hashable, list[float]] = {}
    for g, s in zip(groups.tolist(), scores.tolist()):
        buckets.setdefault(g, []).append(s)
    fn = {"mean": np.mean, "max": np.max, "sum": np.sum}[reduce]
    return {g: float(fn(v)) for g, v in buckets.items()}


def _candidates(pool: SamplePool, state: AnnotationState, mode: str) -> tuple[list[Hashable], dict[Hashable, np.ndarray]]:
    non = state.non_annotated_array()
    if mode == "sample":
        return non.tolist(), {i: np.array([i], dtype=np.intp) for i in non.tolist()}
    if pool.groups is None:
        raise ConfigurationError("group mode needs group assignments")
    open_rows = np.zeros(pool.n_samples, dtype=bool)
    open_rows[non] = True
    members = {}
    for g, rows in pool.group_members().items():
        rows = rows[open_rows[rows]]
        if rows.size:
            members[g] = rows
    return list(members), members


def strategy_step(
    strategy: StrategyConfig,
    pool: SamplePool,
    state: AnnotationState,
    rng: np.random.Generator | None = None,
    uncertainty: np.ndarray | None = None,
    descriptors: np.ndarray | None = None,
    g_pool: DiagGaussian | None = None,
) -> QueryBatch:
    """Select the next batch for one active-learning iteration.

    Args:
        uncertainty: per-row uncertainty for the whole pool (entries of
            annotated rows are ignored). Needed by ``uncertainty`` and by
            ``setcover``/``bsq`` when ``n_unc`` is set.
        descriptors: per-row descriptors for ``setcover``.
        g_pool: Gaussian of the whole pool for ``bsq`` (fitted if omitted).

    Returns:
        A :class:`QueryBatch` of row indices; in group mode the non-annotated
        members of each chosen group, group by group.
    """
    if not state.non_annotated:
        raise StateError("no non-annotated samples left to query")
    keys, members = _candidates(pool, state, strategy.mode)
    kind = strategy.kind
    diag: dict[str, Any] = {}

    def candidate_uncertainty() -> np.ndarray:
        if uncertainty is None:
            raise ConfigurationError(f"strategy {kind!r} needs uncertainty scores")
        u = np.asarray(uncertainty, dtype=np.float64)
        if u.shape != (pool.n_samples,):
            raise ConfigurationError("uncertainty must hold one score per pool sample")
        return np.array([_reduce_rows(u[members[key]], strategy.reduce) for key in keys])

    def uncertain_subset() -> list[int]:
        if strategy.n_unc is None:
            return list(range(len(keys)))
        u = candidate_uncertainty()
        top = top_k_uncertain(u, strategy.n_unc)
        diag["s_unc"] = [_plain(keys[j]) for j in top]
        diag["uncertainty"] = [float(u[j]) for j in top]
        return top

    if kind == "upperbound":
        picks = list(range(len(keys)))
    elif kind == "random":
        if rng is None:
            raise ConfigurationError("random strategy needs a random generator")
        picks = rng.choice(len(keys), size=min(strategy.n_rep, len(keys)), replace=False).tolist()
    elif kind == "uncertainty":
        u = candidate_uncertainty()
        picks = top_k_uncertain(u, strategy.n_rep)
        diag["uncertainty"] = [float(u[j]) for j in picks]
    elif kind == "setcover":
        if descriptors is None:
            raise ConfigurationError("setcover strategy needs descriptors")
        desc = np.asarray(descriptors, dtype=np.float64)
        s_unc = uncertain_subset()
        universe = desc[state.non_annotated_array()]
        chosen = greedy_set_cover([desc[members[keys[j]]] for j in s_unc], universe, strategy.n_rep)
        picks = [s_unc[c] for c in chosen]
    elif kind == "bsq":
        s_unc = uncertain_subset()
        if g_pool is None:
            g_pool = fit_diag_gaussian(pool.embeddings)
        annotated = pool.embeddings[state.annotated_array()]
        g_an = fit_diag_gaussian(annotated)
        member_map = {j: members[keys[j]] for j in s_unc} if strategy.mode == "group" else None
        if member_map is None:
            s_unc_rows = [keys[j] for j in s_unc]
        chosen = select_bsq(
            s_unc if member_map is not None else s_unc_rows,
            pool.embeddings,
            g_pool,
            g_an,
            strategy.n_rep,
            mode=strategy.bsq_mode,
            annotated=annotated,
            members=member_map,
            reduce=strategy.reduce,
        )
        if member_map is None:
            position = {row: j for j, row in zip(s_unc, s_unc_rows)}
            picks = [position[row] for row in chosen]
        else:
            picks = chosen
        rows = np.concatenate([members[keys[j]] for j in picks])
        diag["bsq_score"] = bsq_scores(pool.embeddings[rows], g_pool, g_an).tolist()
    else:  # pragma: no cover - guarded by StrategyConfig
        raise ConfigurationError(f"unknown strategy {kind!r}")

    selected = tuple(int(i) for j in picks for i in members[keys[j]])
    if strategy.mode == "group":
        diag["groups"] = [_plain(keys[j]) for j in picks]
    return QueryBatch(state.iteration + 1, selected, diag)


def _reduce_rows(values: np.ndarray, how: str) -> float:
    return float({"mean": np.mean, "max": np.max, "sum": np.sum}[how](values))


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


# -- experiment loop ---------------------------------------------------------------


@dataclass
class ExperimentLog:
    config: dict[str, Any]
    iterations: list[dict[str, Any]] = field(default_factory=list)
    exhausted: bool = False
    schema_version: int = SCHEMA_VERSION

    def series(self, metric: str) -> list[Any]:
        return [rec.get(metric) for rec in self.iterations]

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "exhausted": self.exhausted,
            "iterations": self.iterations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ExperimentLog:
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise FormatError(f"unsupported log schema version {version!r} (expected {SCHEMA_VERSION})")
        if "config" not in data or "iterations" not in data:
            raise FormatError("log lacks 'config' or 'iterations'")
        return cls(dict(data["config"]), list(data["iterations"]), bool(data.get("exhausted", False)), version)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentLog:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from None
        return cls.from_dict(data)


def pool_fingerprint(pool: SamplePool) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(pool.embeddings).tobytes())
    h.update(repr(pool.sample_ids).encode())
    if pool.labels is not None:
        h.update(repr(pool.labels.tolist()).encode())
    return h.hexdigest()


def _float_or_none(x: float | None) -> float | None:
    if x is None or not math.isfinite(x):
        return None
    return float(x)


def _iteration_seed(seed: int, stream: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, stream, t]).generate_state(1)[0])


def run_experiment(
    pool: SamplePool,
    initial_annotated: Sequence[Hashable],
    strategy: StrategyConfig,
    n_iters: int,
    evaluate: SamplePool | None = None,
    log_mmd: bool = True,
) -> ExperimentLog:
    """Simulate ``n_iters`` active-learning iterations.

    Args:
        pool: the query pool; labels act as the annotation oracle.
        initial_annotated: sample ids of the initial annotated set.
        strategy: query strategy settings.
        n_iters: number of query iterations after the initial set.
        evaluate: optional labelled held-out pool; when given, each record
            carries the proxy learner's label-averaged Dice on it.
        log_mmd: log MMD between the annotated set and the pool.

    Returns:
        A log whose record ``t`` lists the ids that entered the annotated set
        at iteration ``t`` (record 0 is the initial set). The upper bound
        annotates everything at iteration 0 and has a single record. If the
        pool runs dry early the log is truncated and ``exhausted`` is set.
    """
    if n_iters < 0:
        raise ConfigurationError("n_iters must be >= 0")
    init_idx = pool.indices_of(initial_annotated)
    if not init_idx:
        raise ConfigurationError("initial annotated set is empty")
    state = AnnotationState.initial(pool.n_samples, init_idx)
    if (strategy.needs_uncertainty or evaluate is not None) and pool.labels is None:
        raise ConfigurationError("uncertainty strategies and evaluation need a labelled pool (the oracle)")

    rng = np.random.default_rng(np.random.SeedSequence([strategy.seed, 0]))
    emb = pool.embeddings
    classes = np.unique(pool.labels) if pool.labels is not None else None
    g_pool = fit_diag_gaussian(emb)
    pool_self = kernel_mean(emb, emb, strategy.bandwidth, strategy.kernel) if log_mmd else None

    log = ExperimentLog(
        config={
            "strategy": asdict(strategy),
            "n_iters": n_iters,
            "initial_ids": [_plain(s) for s in pool.ids_of(init_idx)],
            "pool": {"n_samples": pool.n_samples, "n_lat": pool.n_lat, "sha256": pool_fingerprint(pool)},
            "g_pool": {"mean": g_pool.mean.tolist(), "std": g_pool.std.tolist()},
            "evaluate": None if evaluate is None else {"n_samples": evaluate.n_samples, "sha256": pool_fingerprint(evaluate)},
        }
    )

    def record(t: int, queried: Sequence[int]) -> None:
        ann = state.annotated_array()
        a = emb[ann]
        rec: dict[str, Any] = {
            "iter": t,
            "queried_ids": [_plain(s) for s in pool.ids_of(queried)],
            "n_annotated": int(ann.size),
            "entropy": class_entropy(pool.labels[ann]) if pool.labels is not None else None,
        }
        if ann.size >= 2:
            g = fit_diag_gaussian(a)
            rec["g_an_mean"], rec["g_an_std"] = g.mean.tolist(), g.std.tolist()
        else:
            rec["g_an_mean"], rec["g_an_std"] = a.mean(axis=0).tolist(), None
        if log_mmd:
            value = kernel_mean(a, a, strategy.bandwidth, strategy.kernel) + pool_self
            value -= 2.0 * kernel_mean(a, emb, strategy.bandwidth, strategy.kernel)
            rec["mmd"] = max(float(value), 0.0)
        else:
            rec["mmd"] = None
        if evaluate is not None:
            rec["dice"] = _float_or_none(_evaluate_dice(pool, ann, evaluate, strategy, classes, t))
        log.iterations.append(rec)

    if strategy.kind == "upperbound":
        batch = strategy_step(strategy, pool, state, rng)
        state = annotate(state, batch)
        record(0, list(init_idx) + list(batch.selected))
        return log

    record(0, init_idx)
    for t in range(1, n_iters + 1):
        if not state.non_annotated:
            log.exhausted = True
            break
        unc = None
        if strategy.needs_uncertainty:
            ann = state.annotated_array()
            non = state.non_annotated_array()
            learner = proxy_fit(
                emb[ann],
                pool.labels[ann],
                k=min(strategy.k, ann.size),
                n_models=strategy.n_models,
                seed=_iteration_seed(strategy.seed, 1, t),
                classes=classes,
            )
            unc = np.zeros(pool.n_samples)
            unc[non] = vote_uncertainty(proxy_votes(learner, emb[non]))
        batch = strategy_step(strategy, pool, state, rng, uncertainty=unc, descriptors=emb, g_pool=g_pool)
        state = annotate(state, batch)
        record(t, batch.selected)
    return log


def _evaluate_dice(pool, ann, evaluate, strategy, classes, t) -> float:
    if evaluate.labels is None:
        raise ConfigurationError("evaluation pool has no labels")
    learner = proxy_fit(
        pool.embeddings[ann],
        pool.labels[ann],
        k=min(strategy.k, ann.size),
        n_models=strategy.n_models,
        seed=_iteration_seed(strategy.seed, 2, t),
        classes=classes,
    )
    votes = proxy_votes(learner, evaluate.embeddings).mean(axis=0)
    pred = learner.classes[np.argmax(votes, axis=1)]
    scores = [dice(pred == c, evaluate.labels == c) for c in classes]
    scores = [s for s in scores if not math.isnan(s)]
    return float(np.mean(scores)) if scores else math.nan


# -- imbalanced-draw protocol ----------------------------------------------------------------


@dataclass(frozen=True)
class ProtocolConfig:
    """Imbalanced initial draws followed by representative queries.

    Defaults: 10 classes x 500 samples in 5 dims, 5 experiments, 10
    initial samples with 3 class priors divided by 10, then 30 iterations
    of 10 queries without an uncertainty pre-filter.
    """

    n_experiments: int = 5
    n_classes: int = 10
    per_class: int = 500
    dims: int = 5
    separation: float = 0.5
    n_init: int = 10
    n_reduced: int = 3
    reduce_factor: float = 10.0
    n_iters: int = 30
    n_rep: int = 10
    seed: int = 0


def run_imbalanced_protocol(
    protocol: ProtocolConfig = ProtocolConfig(),
    kind: str = "bsq",
    bsq_mode: str = "sequential_refit",
    log_mmd: bool = True,
) -> tuple[SamplePool, list[ExperimentLog]]:
    """Run one experiment per imbalanced initial draw on a shared synthetic pool.

    Pool, priors and initial draws depend only on ``protocol.seed``, so two
    strategies run with the same protocol start from identical sets.
    """
    root = np.random.SeedSequence(protocol.seed)
    pool_seq, *exp_seqs = root.spawn(protocol.n_experiments + 1)
    pool = synth_clusters(
        protocol.n_classes,
        protocol.per_class,
        protocol.dims,
        seed=int(pool_seq.generate_state(1)[0]),
        separation=protocol.separation,
    )
    logs = []
    for e, seq in enumerate(exp_seqs):
        rng = np.random.default_rng(seq)
        priors = imbalanced_priors(protocol.n_classes, protocol.n_reduced, protocol.reduce_factor, rng)
        init = draw_initial(pool, protocol.n_init, rng, class_priors=priors)
        strategy = StrategyConfig(
            kind=kind, n_unc=None, n_rep=protocol.n_rep, bsq_mode=bsq_mode, seed=int(rng.integers(2**31))
        )
        log = run_experiment(pool, pool.ids_of(init), strategy, protocol.n_iters, log_mmd=log_mmd)
        log.config["protocol"] = {**asdict(protocol), "experiment": e, "class_priors": priors.tolist()}
        logs.append(log)
    return pool, logs
