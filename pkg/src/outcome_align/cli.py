"""Command-line entry point: generate, train, eval, sweep, gradcheck.

Exit codes: 0 success, 2 usage/validation, 3 numerical abort, 4 undefined
metric, 5 gradient-check failure.  Every written artifact gets a sibling
``<artifact>.manifest.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .gradcheck import COMPONENTS, THRESHOLD, CheckDims, run_gradcheck
from .metrics import MetricUndefined
from .model import Dims
from .objective import SINGLE_CLASS_POLICIES, ObjectiveConfig
from .synthcohort import CohortFormatError, CohortSpec, generate_cohort, read_cohort, split_cohort, write_cohort
from .trainkit import CheckpointError, NumericalAbort, TrainConfig, evaluate, load_checkpoint, sweep_sample_efficiency, sweep_to_csv, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_METRIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _typed(kind, check, desc):
    def parse(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {kind.__name__}, got {text!r}") from None
        if not check(value):
            raise argparse.ArgumentTypeError(f"must be {desc}, got {text}")
        return value
    return parse


positive_int = _typed(int, lambda v: v > 0, "a positive integer")
nonneg_int = _typed(int, lambda v: v >= 0, "a non-negative integer")
positive_float = _typed(float, lambda v: v > 0, "> 0")
nonneg_float = _typed(float, lambda v: v >= 0, ">= 0")
open_unit = _typed(float, lambda v: 0 < v < 1, "in (0, 1)")
half_open_unit = _typed(float, lambda v: 0 <= v < 1, "in [0, 1)")
seed_int = _typed(int, lambda v: 0 <= v < 2**64, "a 64-bit unsigned integer")


def _list_of(item):
    def parse(text):
        parts = [p for p in text.split(",") if p.strip()]
        if not parts:
            raise argparse.ArgumentTypeError("expected a comma-separated list")
        return [item(p.strip()) for p in parts]
    return parse


fraction_list = _list_of(_typed(float, lambda v: 0 < v <= 1, "in (0, 1]"))
seed_list = _list_of(seed_int)
width_list = _list_of(positive_int)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_manifest(artifact, command: str, config: dict, inputs, started: float) -> None:
    doc = {
        "command": command,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "artifact": str(artifact),
        "artifact_sha256": sha256_file(artifact),
        "tool_version": f"outcome_align {__version__}",
        "wall_clock_seconds": round(time.monotonic() - started, 3),
    }
    write_atomic(f"{artifact}.manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _add_train_flags(p):
    p.add_argument("--lambda", dest="lam", type=nonneg_float, default=0.05)
    p.add_argument("--epsilon", type=positive_float, default=1e-5)
    p.add_argument("--ema-decay", type=half_open_unit, default=None)
    p.add_argument("--single-class-policy", choices=SINGLE_CLASS_POLICIES, default="skip")
    p.add_argument("--batch-size", type=positive_int, default=64)
    p.add_argument("--epochs", type=nonneg_int, default=30)
    p.add_argument("--learning-rate", type=positive_float, default=0.05)
    p.add_argument("--momentum", type=half_open_unit, default=0.9)
    p.add_argument("--seed", type=seed_int, default=0)
    p.add_argument("--eval-every", type=positive_int, default=1)
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--k", type=positive_int, default=16)
    p.add_argument("--m", type=positive_int, default=4)
    p.add_argument("--d", type=positive_int, default=16)
    p.add_argument("--hidden", type=width_list, default=[32])


def _train_config(args, checkpoint=None) -> tuple[TrainConfig, Dims]:
    obj = ObjectiveConfig(args.lam, args.epsilon, args.ema_decay, args.single_class_policy)
    cfg = TrainConfig(objective=obj, batch_size=args.batch_size, epochs=args.epochs,
                      learning_rate=args.learning_rate, momentum=args.momentum, seed=args.seed,
                      eval_every=args.eval_every, checkpoint_path=checkpoint,
                      shuffle=not args.no_shuffle)
    return cfg, Dims(k=args.k, m=args.m, d=args.d, hidden=tuple(args.hidden))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="outcome-align", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic cohort")
    g.add_argument("--n", "--n-patients", dest="n_patients", type=positive_int, default=5000)
    g.add_argument("--features", "--n-features", dest="n_features", type=positive_int, default=40)
    g.add_argument("--static", "--n-static", dest="n_static", type=nonneg_int, default=4)
    g.add_argument("--prevalence", type=open_unit, default=0.3)
    g.add_argument("--signal-dim", type=positive_int, default=4)
    g.add_argument("--nuisance-dim", type=nonneg_int, default=32)
    g.add_argument("--nuisance-scale", type=positive_float, default=8.0)
    g.add_argument("--effect-size", type=positive_float, default=2.0)
    g.add_argument("--events-min", type=nonneg_int, default=40)
    g.add_argument("--events-max", type=nonneg_int, default=120)
    g.add_argument("--horizon-days", type=positive_float, default=365.0)
    g.add_argument("--value-noise", type=nonneg_float, default=0.5)
    g.add_argument("--static-noise", type=nonneg_float, default=1.0)
    g.add_argument("--seed", type=seed_int, default=0)
    g.add_argument("--split", type=_list_of(open_unit), default=None,
                   help="also write <out>.train/.val/.test parts with these ratios")
    g.add_argument("--split-seed", type=seed_int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--cohort", required=True)
    t.add_argument("--val", default=None)
    _add_train_flags(t)
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--history", default=None)
    t.add_argument("--no-regularizer", action="store_true", help=argparse.SUPPRESS)

    e = sub.add_parser("eval", help="metrics and geometry report")
    e.add_argument("--cohort", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--bins", type=positive_int, default=10)
    e.add_argument("--epsilon", type=positive_float, default=1e-5)
    e.add_argument("--out", default=None, help="report file (default <checkpoint>.report.json)")

    s = sub.add_parser("sweep", help="sample-efficiency sweep")
    s.add_argument("--cohort", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--fractions", type=fraction_list, required=True)
    s.add_argument("--seeds", type=seed_list, required=True)
    _add_train_flags(s)
    s.add_argument("--out", required=True)

    c = sub.add_parser("gradcheck", help="reverse-mode vs finite differences")
    c.add_argument("--seed", type=seed_int, default=1)
    c.add_argument("--dims", default="", help="comma list of name=value, e.g. k=4,d=3,n=8")
    c.add_argument("--perturb", choices=COMPONENTS, default=None, help=argparse.SUPPRESS)
    return parser


def _load_cohort(path, **kw):
    try:
        return read_cohort(path, **kw)
    except FileNotFoundError:
        raise UsageError(f"{path}: no such file") from None
    except CohortFormatError as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_generate(args, started) -> int:
    fields = {k: getattr(args, k) for k in (
        "n_patients", "n_features", "n_static", "prevalence", "signal_dim", "nuisance_dim",
        "effect_size", "events_min", "events_max", "horizon_days", "nuisance_scale",
        "value_noise", "static_noise", "seed")}
    try:
        spec = CohortSpec(**fields)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cohort = generate_cohort(spec)
    write_cohort(cohort, args.out)
    write_manifest(args.out, "generate", asdict(spec), [], started)
    print(f"n={len(cohort)} prevalence={cohort.prevalence!r} "
          f"F={spec.n_features} S={spec.n_static} out={args.out}")
    if args.split:
        try:
            parts = split_cohort(cohort, args.split, seed=args.split_seed)
        except ValueError as exc:
            raise UsageError(f"--split: {exc}") from None
        stem = args.out[:-6] if args.out.endswith(".jsonl") else args.out
        for name, part in zip(("train", "val", "test"), parts):
            path = f"{stem}.{name}.jsonl"
            write_cohort(part, path)
            write_manifest(path, "generate", {"spec": asdict(spec), "split": args.split,
                                              "split_seed": args.split_seed}, [], started)
            print(f"{name}: n={len(part)} prevalence={part.prevalence!r} out={path}")
    return EXIT_OK


def cmd_train(args, started) -> int:
    cohort = _load_cohort(args.cohort)
    val = _load_cohort(args.val, expect_schema=cohort.schema) if args.val else None
    try:
        cfg, dims = _train_config(args, args.checkpoint)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        _, history = train(cfg, cohort, val, cohort.schema, dims,
                           regularizer=not args.no_regularizer)
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    config = {"train": cfg.to_dict(), "dims": asdict(dims), "regularizer": not args.no_regularizer}
    inputs = [args.cohort] + ([args.val] if args.val else [])
    write_manifest(args.checkpoint, "train", config, inputs, started)
    if args.history:
        write_atomic(args.history, history.to_jsonl())
        write_manifest(args.history, "train", config, inputs, started)
    for rec in history.records:
        line = f"epoch={rec.epoch} sup={rec.sup:.6f} total={rec.total:.6f} skipped={rec.skipped_batches}"
        if rec.rdisc is not None:
            line += f" rdisc={rec.rdisc:.6f}"
        if rec.val_metrics is not None:
            line += f" val_auroc={rec.val_metrics.auroc:.4f} val_rdisc={rec.val_geometry.rayleigh:.4f}"
        print(line)
    return EXIT_OK


def cmd_eval(args, started) -> int:
    cohort = _load_cohort(args.cohort)
    try:
        params = load_checkpoint(args.checkpoint, expect_schema=cohort.schema)
    except FileNotFoundError:
        raise UsageError(f"{args.checkpoint}: no such file") from None
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None
    try:
        metrics, geometry = evaluate(params, cohort, args.epsilon, args.bins)
    except MetricUndefined as exc:
        print(f"error: metric undefined: {exc}", file=sys.stderr)
        return EXIT_METRIC
    out = args.out or f"{args.checkpoint}.report.json"
    doc = {"metrics": metrics.to_dict(), "geometry": geometry.to_dict(), "bins": args.bins}
    write_atomic(out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "eval", {"bins": args.bins, "epsilon": args.epsilon},
                   [args.cohort, args.checkpoint], started)
    print(metrics.to_text())
    print(geometry.to_text())
    return EXIT_OK


def cmd_sweep(args, started) -> int:
    cohort = _load_cohort(args.cohort)
    val = _load_cohort(args.val, expect_schema=cohort.schema)
    try:
        cfg, dims = _train_config(args)
        rows = sweep_sample_efficiency(cfg, cohort, val, args.fractions, args.seeds, dims)
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MetricUndefined as exc:
        print(f"error: metric undefined: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    table = sweep_to_csv(rows)
    write_atomic(args.out, table)
    write_manifest(args.out, "sweep", {"train": cfg.to_dict(), "dims": asdict(dims),
                                       "fractions": args.fractions, "seeds": args.seeds},
                   [args.cohort, args.val], started)
    print(table, end="")
    return EXIT_OK


def _parse_dims(text: str) -> CheckDims:
    kwargs = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, _, value = part.partition("=")
        if name not in CheckDims.__dataclass_fields__ or not value:
            raise UsageError(f"--dims: bad entry {part!r}")
        try:
            kwargs[name] = int(value)
        except ValueError:
            raise UsageError(f"--dims: {name} must be an integer") from None
    try:
        return CheckDims(**kwargs)
    except ValueError as exc:
        raise UsageError(f"--dims: {exc}") from None


def cmd_gradcheck(args, started) -> int:
    dims = _parse_dims(args.dims)
    results = run_gradcheck(args.seed, dims, perturb=args.perturb)
    failing = [c for c, v in results.items() if not v < THRESHOLD]
    for comp, value in results.items():
        status = "FAIL" if comp in failing else "ok"
        print(f"{comp} max_rel_discrepancy={value:.3e} {status}")
    if failing:
        print(f"gradient check failed: {', '.join(failing)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    started = time.monotonic()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, started)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
