"""Turn experiment logs into long-format series and pairwise difference tables."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from alquery.bsq import gaussian_product
from alquery.simulate import ExperimentLog

log = logging.getLogger(__name__)

BASE_METRICS = ("n_annotated", "entropy", "mmd", "dice", "msd")
DERIVED_METRICS = ("latent_mean_shift", "latent_product_std")
LONG_COLUMNS = ["strategy", "iteration", "metric", "value", "seed"]
DIFF_COLUMNS = ["strategy_a", "strategy_b", "iteration", "metric", "n", "median", "q1", "q3", "mean"]


def strategy_label(lg: ExperimentLog) -> str:
    cfg = lg.config.get("strategy", {})
    label = str(cfg.get("kind", "unknown"))
    if cfg.get("mode") == "group":
        label += "-group"
    return label


def _derived(lg: ExperimentLog, rec: dict[str, Any], metric: str) -> float | None:
    mean, std = rec.get("g_an_mean"), rec.get("g_an_std")
    if mean is None or std is None:
        return None
    mu, sd = gaussian_product(list(zip(mean, std)))
    if metric == "latent_product_std":
        return sd
    ref = lg.config.get("g_pool")
    if not ref:
        return None
    ref_mu, _ = gaussian_product(list(zip(ref["mean"], ref["std"])))
    return mu - ref_mu


def metric_series(lg: ExperimentLog) -> dict[str, list[float | None]]:
    """All metrics that have at least one value in ``lg``, as per-iteration lists."""
    out: dict[str, list[float | None]] = {}
    for m in BASE_METRICS:
        values = [rec.get(m) for rec in lg.iterations]
        if any(v is not None for v in values):
            out[m] = [None if v is None else float(v) for v in values]
    for m in DERIVED_METRICS:
        values = [_derived(lg, rec, m) for rec in lg.iterations]
        if any(v is not None for v in values):
            out[m] = values
    return out


def long_rows(logs: Iterable[ExperimentLog]) -> list[dict[str, Any]]:
    rows = []
    for lg in logs:
        label = strategy_label(lg)
        seed = lg.config.get("strategy", {}).get("seed")
        series = metric_series(lg)
        for i, rec in enumerate(lg.iterations):
            for metric, values in series.items():
                rows.append(
                    {"strategy": label, "iteration": rec.get("iter", i), "metric": metric, "value": values[i], "seed": seed}
                )
    return rows


def _holdout_key(lg: ExperimentLog) -> tuple:
    cfg = lg.config
    return (cfg.get("pool", {}).get("sha256"), tuple(cfg.get("initial_ids", ())))


def quartiles(values: Sequence[float]) -> tuple[float, float, float]:
    """``(q1, median, q3)`` with linear interpolation between order statistics."""
    q1, med, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25, 50, 75])
    return float(q1), float(med), float(q3)


def difference_rows(logs: Sequence[ExperimentLog]) -> list[dict[str, Any]]:
    """Per-iteration statistics of ``metric(a) - metric(b)`` across shared holdouts.

    Logs are paired when they ran on the same pool from the same initial
    set. Pairs of unequal length are truncated to the common range.
    """
    by_strategy: dict[str, dict[tuple, ExperimentLog]] = {}
    for lg in logs:
        by_strategy.setdefault(strategy_label(lg), {})[_holdout_key(lg)] = lg
    rows = []
    for a, b in itertools.combinations(sorted(by_strategy), 2):
        shared = sorted(set(by_strategy[a]) & set(by_strategy[b]), key=repr)
        if not shared:
            log.warning("no shared holdouts between %s and %s", a, b)
            continue
        pairs = [(metric_series(by_strategy[a][k]), metric_series(by_strategy[b][k])) for k in shared]
        lengths = {len(by_strategy[a][k].iterations) for k in shared} | {len(by_strategy[b][k].iterations) for k in shared}
        n_common = min(lengths)
        if len(lengths) > 1:
            log.warning("%s vs %s: logs differ in length, truncating to %d iterations", a, b, n_common)
        metrics = [m for m in (*BASE_METRICS, *DERIVED_METRICS) if all(m in sa and m in sb for sa, sb in pairs)]
        for t in range(n_common):
            for m in metrics:
                diffs = [sa[m][t] - sb[m][t] for sa, sb in pairs if sa[m][t] is not None and sb[m][t] is not None]
                if not diffs:
                    continue
                q1, med, q3 = quartiles(diffs)
                rows.append(
                    {
                        "strategy_a": a,
                        "strategy_b": b,
                        "iteration": t,
                        "metric": m,
                        "n": len(diffs),
                        "median": med,
                        "q1": q1,
                        "q3": q3,
                        "mean": float(np.mean(diffs)),
                    }
                )
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def write_rows(path: str | Path, rows: list[dict[str, Any]], columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def write_report(logs: Sequence[ExperimentLog], prefix: str | Path) -> list[Path]:
    """Write ``<prefix>_long.csv`` and ``<prefix>_diff.csv``; return their paths."""
    prefix = Path(prefix)
    long_path = prefix.with_name(prefix.name + "_long.csv")
    diff_path = prefix.with_name(prefix.name + "_diff.csv")
    write_rows(long_path, long_rows(logs), LONG_COLUMNS)
    write_rows(diff_path, difference_rows(logs), DIFF_COLUMNS)
    return [long_path, diff_path]
