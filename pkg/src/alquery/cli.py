"""Command-line entry point: ``alquery {synth,ingest-idx,embed,run,query,report}``.

Every command writes ``<out>.manifest.json`` next to its output, holding the
argv, resolved options, inputs, outputs and version needed to replay it.
Exit codes: 0 success, 1 I/O or data error, 2 usage/configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from alquery import __version__
from alquery.encode import encode, fit_pca, fit_random_projection
from alquery.errors import (
    ConfigurationError,
    DataError,
    FormatError,
    NumericError,
    ShapeError,
    StateError,
)
from alquery.ingest import (
    images_to_matrix,
    read_idx,
    read_matrix_csv,
    read_pool_csv,
    read_prediction_stacks,
    write_matrix_csv,
    write_pool_csv,
)
from alquery.pool import AnnotationState, create_pool
from alquery.report import write_report
from alquery.scoring import stack_uncertainty
from alquery.simulate import (
    STRATEGIES,
    ExperimentLog,
    StrategyConfig,
    proxy_fit,
    proxy_votes,
    run_experiment,
    strategy_step,
    vote_uncertainty,
)
from alquery.synth import draw_initial, imbalanced_priors, synth_clusters

log = logging.getLogger("alquery")


class UsageError(ConfigurationError):
    pass


# -- helpers -----------------------------------------------------------------------


@contextmanager
def atomic_path(path: str | Path) -> Iterator[Path]:
    """Yield a temporary sibling of ``path`` and move it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_text_atomic(path: str | Path, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text, encoding="utf-8")


def read_config(path: str | Path) -> dict[str, str]:
    """Parse a ``key=value`` file; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def read_id_file(path: str | Path) -> list[str]:
    ids = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            ids.extend(tok for tok in line.replace(",", " ").split())
    return ids


def write_manifest(out: Path, command: str, argv: Sequence[str], args: argparse.Namespace, inputs, outputs) -> None:
    options = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "handler"}
    manifest = {
        "command": command,
        "argv": list(argv),
        "inputs": [str(p) for p in inputs if p],
        "outputs": [str(p) for p in outputs],
        "config": options,
        "seed": getattr(args, "seed", None),
        "version": __version__,
    }
    write_text_atomic(Path(str(out) + ".manifest.json"), json.dumps(manifest, indent=2, default=str) + "\n")


def _n_unc(value: int) -> int | None:
    return None if value == 0 else value


def _strategy(args: argparse.Namespace) -> StrategyConfig:
    return StrategyConfig(
        kind=args.strategy,
        n_unc=_n_unc(args.n_unc),
        n_rep=args.batch,
        mode=args.mode,
        bsq_mode=args.bsq_mode,
        reduce=args.reduce,
        seed=args.seed,
        k=args.k,
        n_models=args.n_models,
        bandwidth=getattr(args, "bandwidth", 1.0),
        kernel=getattr(args, "kernel", "gaussian"),
    )


# -- commands ------------------------------------------------------------------------


def cmd_synth(args, argv):
    root = np.random.SeedSequence(args.seed)
    pool_seq, init_seq = root.spawn(2)
    pool = synth_clusters(
        args.classes, args.per_class, args.dims, seed=int(pool_seq.generate_state(1)[0]), separation=args.separation
    )
    out = Path(args.out)
    with atomic_path(out) as tmp:
        write_pool_csv(tmp, pool)
    outputs = [out]
    if args.init_out:
        rng = np.random.default_rng(init_seq)
        priors = imbalanced_priors(args.classes, args.reduce_classes, args.reduce_factor, rng)
        init = draw_initial(pool, args.n_init, rng, class_priors=priors)
        write_text_atomic(args.init_out, "".join(f"{pool.sample_ids[i]}\n" for i in init))
        outputs.append(Path(args.init_out))
    write_manifest(out, "synth", argv, args, [], outputs)


def cmd_ingest_idx(args, argv):
    images = read_idx(args.images)
    x = images_to_matrix(images, standardize=args.standardize, downsample=args.downsample)
    labels = None
    if args.labels:
        lab = read_idx(args.labels)
        if lab.dims != (images.dims[0],):
            raise DataError(f"label file dims {lab.dims} do not match {images.dims[0]} images")
        labels = lab.data.astype(np.int64)
    if args.limit:
        x = x[: args.limit]
        labels = None if labels is None else labels[: args.limit]
    out = Path(args.out)
    with atomic_path(out) as tmp:
        write_matrix_csv(tmp, x, labels=labels)
    write_manifest(out, "ingest-idx", argv, args, [args.images, args.labels], [out])


def cmd_embed(args, argv):
    matrix, labels, groups, ids = read_matrix_csv(args.input)
    if args.method == "pca":
        enc = fit_pca(matrix, args.n_lat)
    else:
        enc = fit_random_projection(matrix, args.n_lat, seed=args.seed)
    z = encode(enc, matrix)
    out = Path(args.out)
    with atomic_path(out) as tmp:
        write_matrix_csv(tmp, z, labels=labels, groups=groups, ids=ids)
    write_manifest(out, "embed", argv, args, [args.input], [out])


def _initial_ids(args, pool) -> list:
    if args.init_file:
        return read_id_file(args.init_file)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 7]))
    return pool.ids_of(draw_initial(pool, args.n_init, rng, class_priors=None))


def cmd_run(args, argv):
    pool = read_pool_csv(args.pool)
    strategy = _strategy(args)
    test = read_pool_csv(args.test_file) if args.test_file else None
    result = run_experiment(pool, _initial_ids(args, pool), strategy, args.iters, evaluate=test, log_mmd=not args.no_mmd)
    out = Path(args.out)
    write_text_atomic(out, result.to_json())
    write_manifest(out, "run", argv, args, [args.pool, args.init_file, args.test_file], [out])


def cmd_query(args, argv):
    pool = read_pool_csv(args.pool)
    strategy = _strategy(args)
    state = AnnotationState.initial(pool.n_samples, pool.indices_of(read_id_file(args.annotated_file)))
    unc = None
    if strategy.needs_uncertainty:
        non = state.non_annotated_array()
        unc = np.zeros(pool.n_samples)
        if args.stacks:
            stacks = read_prediction_stacks(args.stacks)
            for i in non:
                sid = pool.sample_ids[i]
                stack = stacks.get(sid, stacks.get(str(sid)))
                if stack is None:
                    raise DataError(f"no prediction stack for non-annotated sample {sid!r}")
                unc[i] = stack_uncertainty(stack, binarize=args.binarize)
        elif pool.labels is not None:
            ann = state.annotated_array()
            learner = proxy_fit(
                pool.embeddings[ann],
                pool.labels[ann],
                k=min(strategy.k, ann.size),
                n_models=strategy.n_models,
                seed=args.seed,
                classes=np.unique(pool.labels),
            )
            unc[non] = vote_uncertainty(proxy_votes(learner, pool.embeddings[non]))
        else:
            raise ConfigurationError(f"strategy {strategy.kind!r} needs --stacks or a labelled pool")
    descriptors = pool.embeddings
    if args.descriptors:
        dmat, _, _, dids = read_matrix_csv(args.descriptors)
        order = create_pool(dmat, sample_ids=dids).indices_of(pool.sample_ids)
        descriptors = dmat[order]
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0]))
    batch = strategy_step(strategy, pool, state, rng, uncertainty=unc, descriptors=descriptors)
    result = {
        "strategy": strategy.kind,
        "selected_ids": [_plain(s) for s in pool.ids_of(batch.selected)],
        "scores": batch.scores,
    }
    out = Path(args.out)
    write_text_atomic(out, json.dumps(result, indent=2, default=_plain) + "\n")
    write_manifest(out, "query", argv, args, [args.pool, args.annotated_file, args.stacks, args.descriptors], [out])


def _plain(v: Any):
    return v.item() if isinstance(v, np.generic) else v


def cmd_report(args, argv):
    logs = [ExperimentLog.load(p) for p in args.logs]
    outputs = write_report(logs, args.out)
    write_manifest(Path(args.out), "report", argv, args, args.logs, outputs)


# -- parser ----------------------------------------------------------------------------


def _add_strategy_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=STRATEGIES, default="bsq")
    p.add_argument("--batch", type=int, default=32, help="samples (or groups) queried per iteration")
    p.add_argument("--n-unc", type=int, default=64, help="uncertainty pre-filter size; 0 disables it")
    p.add_argument("--mode", choices=("sample", "group"), default="sample")
    p.add_argument("--bsq-mode", choices=("one_shot", "sequential_refit"), default="sequential_refit")
    p.add_argument("--reduce", choices=("mean", "max", "sum"), default="mean", help="group score reduction")
    p.add_argument("--k", type=int, default=5, help="neighbours of the proxy learner")
    p.add_argument("--n-models", type=int, default=17, help="bootstrap models of the proxy learner")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--config", help="key=value file overriding option defaults")

    parser = argparse.ArgumentParser(prog="alquery", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"alquery {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("synth", parents=[shared], help="generate a synthetic labelled pool")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--dims", type=int, default=5)
    p.add_argument("--separation", type=float, default=0.5, help="class-center std; within-class std is sqrt(1 - s^2)")
    p.add_argument("--init-out", help="also write an imbalanced initial id list here")
    p.add_argument("--n-init", type=int, default=10)
    p.add_argument("--reduce-classes", type=int, default=3)
    p.add_argument("--reduce-factor", type=float, default=10.0)
    p.add_argument("--out", default="pool.csv")
    p.set_defaults(handler=cmd_synth)
    subs["synth"] = p

    p = sub.add_parser("ingest-idx", parents=[shared], help="convert IDX images (and labels) to a matrix CSV")
    p.add_argument("--images", required=True)
    p.add_argument("--labels")
    p.add_argument("--standardize", action="store_true", help="per-image zero mean, unit variance")
    p.add_argument("--downsample", type=int, default=1, help="integer block-average factor")
    p.add_argument("--limit", type=int, default=0, help="keep only the first N images")
    p.add_argument("--out", default="matrix.csv")
    p.set_defaults(handler=cmd_ingest_idx)
    subs["ingest-idx"] = p

    p = sub.add_parser("embed", parents=[shared], help="encode a matrix CSV with a linear encoder")
    p.add_argument("--input", required=True)
    p.add_argument("--method", choices=("pca", "random"), default="pca")
    p.add_argument("--n-lat", type=int, default=5)
    p.add_argument("--out", default="embeddings.csv")
    p.set_defaults(handler=cmd_embed)
    subs["embed"] = p

    p = sub.add_parser("run", parents=[shared], help="simulate an active-learning experiment")
    p.add_argument("--pool", required=True)
    p.add_argument("--init-file", help="initial annotated ids, one per line")
    p.add_argument("--n-init", type=int, default=10, help="uniform initial draw size when --init-file is absent")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--test-file", help="labelled held-out pool for proxy Dice")
    p.add_argument("--bandwidth", type=float, default=1.0, help="MMD kernel bandwidth")
    p.add_argument("--kernel", choices=("gaussian", "unsquared"), default="gaussian")
    p.add_argument("--no-mmd", action="store_true")
    _add_strategy_options(p)
    p.add_argument("--out", default="log.json")
    p.set_defaults(handler=cmd_run)
    subs["run"] = p

    p = sub.add_parser("query", parents=[shared], help="select the next batch for a given annotated set")
    p.add_argument("--pool", required=True)
    p.add_argument("--annotated-file", required=True)
    p.add_argument("--stacks", help="prediction-stack CSV supplying uncertainty")
    p.add_argument("--binarize", action="store_true", help="score hard label maps instead of probabilities")
    p.add_argument("--descriptors", help="matrix CSV of set-cover descriptors (default: embeddings)")
    _add_strategy_options(p)
    p.add_argument("--out", default="query.json")
    p.set_defaults(handler=cmd_query)
    subs["query"] = p

    p = sub.add_parser("report", parents=[shared], help="tabulate experiment logs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--out", default="report")
    p.set_defaults(handler=cmd_report)
    subs["report"] = p
    return parser, subs


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sp = subs[args.command]
        overrides = read_config(args.config)
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        sp.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ConfigurationError, OSError) as exc:
        print(f"alquery: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigurationError) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.handler(args, argv)
    except ConfigurationError as exc:
        print(f"alquery: configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, ShapeError, StateError, NumericError, OSError) as exc:
        print(f"alquery: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
