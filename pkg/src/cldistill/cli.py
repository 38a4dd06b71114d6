"""Command-line entry point.

    cldistill run --config cfg.json --out runs/a [--override distill.variant=gkd ...]
    cldistill sweep --config cfg.json --out sweeps/s --variants gkd,rdkd --seeds 0,1 --orders 5
    cldistill compress --teacher teacher.ckpt --config student.json --out comp/ --pseudo-tasks 4
    cldistill validate-config --config cfg.json
    cldistill make-fixtures --out fixtures/

Exit codes: 0 success, 1 runtime failure, 2 config or usage error.
``CLDISTILL_LOG`` selects the log level (error, info, debug).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .compress import run_compression, train_teacher
from .config import (
    BENCHMARK_PRESET,
    COMPRESS_PRESET,
    COMPRESS_TEACHER_DIMS,
    apply_overrides,
    from_dict,
    load_raw,
)
from .data import generate_blobs, save_cache, write_idx_images, write_idx_labels
from .errors import ConfigError, FormatError
from .metrics import aggregate_orders
from .model import MLPClassifier
from .trainer import load_datasets, run_experiment

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

RUN_FILES = ("runlog.jsonl", "metrics.json", "curves.csv", "resolved-config.json")
CURVE_COLUMNS = ("kind", "step", "index", "sigma", "value", "std")

log = logging.getLogger("cldistill")


class UsageFailure(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _resolve(config_path, overrides) -> dict:
    """Raw config with overrides applied, validated; returns the full kebab-case dict."""
    raw = apply_overrides(load_raw(config_path), overrides)
    return from_dict(raw).to_dict()


# ---------------------------------------------------------------------------
# run


def _curve_rows(runlog) -> list[dict]:
    rows = []

    def add(kind, step="", index="", sigma="", value="", std=""):
        rows.append({"kind": kind, "step": step, "index": index, "sigma": sigma, "value": value, "std": std})

    for rec in runlog.steps:
        add("seen-acc", rec.step, value=rec.seen_acc)
        for j, acc in enumerate(rec.task_acc):
            add("task-acc", rec.step, j, value=acc)
        if rec.old_acc is not None:
            add("old-acc", rec.step, value=rec.old_acc)
            add("new-acc", rec.step, value=rec.new_acc)
        if rec.lambda_trace:
            add("lambda-mean", rec.step, value=float(np.mean(rec.lambda_trace)))
        for epoch, loss in enumerate(rec.epoch_loss):
            add("train-loss", rec.step, epoch, value=loss["total"])
    if runlog.flatness is not None:
        for sigma, mean, std in runlog.flatness.rows():
            add("flatness", sigma=sigma, value=mean, std=std)
    return rows


def execute_run(resolved: dict, out_dir) -> dict:
    """Run one experiment from a resolved config dict and write its artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = from_dict(resolved)
    _write_json(out / "resolved-config.json", cfg.to_dict())
    train, test = load_datasets(cfg)
    runlog = run_experiment(cfg, train, test)
    summary = runlog.summary()
    with open(out / "runlog.jsonl", "w") as fh:
        fh.write(json.dumps({"type": "config", "version": __version__, "config": runlog.config}, sort_keys=True) + "\n")
        for rec in runlog.jsonl_records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({"type": "summary", **summary}, sort_keys=True) + "\n")
    _write_json(out / "metrics.json", summary)
    with open(out / "curves.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        writer.writerows(_curve_rows(runlog))
    runlog.state.model.save(out / "model.ckpt")
    (out / "exemplars").mkdir(exist_ok=True)
    runlog.state.store.dump(out / "exemplars")
    return summary


def cmd_run(args) -> int:
    resolved = _resolve(args.config, args.override)
    summary = execute_run(resolved, args.out)
    print(f"avg-incremental-accuracy {summary['avg-incremental-accuracy']:.2f}  ->  {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def _parse_list(text, cast, flag):
    try:
        items = [cast(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageFailure(f"{flag}: cannot parse {text!r}") from None
    if not items:
        raise UsageFailure(f"{flag}: empty list")
    return items


def _sweep_cell(resolved: dict, cell_dir: str) -> tuple[str, dict | None, str | None]:
    try:
        return cell_dir, execute_run(resolved, cell_dir), None
    except Exception as exc:  # recorded; the sweep carries on
        return cell_dir, None, f"{type(exc).__name__}: {exc}"


def cmd_sweep(args) -> int:
    base = apply_overrides(load_raw(args.config), args.override)
    from_dict(base)
    variants = _parse_list(args.variants, str, "--variants") if args.variants else [from_dict(base).distill.variant]
    seeds = _parse_list(args.seeds, int, "--seeds") if args.seeds else [from_dict(base).seed]
    if args.orders is not None and args.orders < 1:
        raise UsageFailure("--orders: need at least one order")
    orders = list(range(args.orders)) if args.orders else [None]
    parallel = args.parallel if args.parallel else max(1, (os.cpu_count() or 1) - 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cells, todo = [], []
    for variant in variants:
        for seed in seeds:
            for order in orders:
                name = f"{variant}/seed-{seed}/order-{'config' if order is None else order}"
                sets = [f"distill.variant={json.dumps(variant)}", f"seed={seed}"]
                if order is not None:
                    sets.append(f"class-order-seed={order}")
                resolved = from_dict(apply_overrides(base, sets)).to_dict()
                cell_dir = str(out / name)
                cells.append((variant, seed, order, cell_dir))
                metrics = Path(cell_dir) / "metrics.json"
                if args.resume and metrics.exists():
                    log.info("resume: skipping finished cell %s", name)
                    continue
                todo.append((resolved, cell_dir))

    failures = {}
    if parallel == 1 or len(todo) <= 1:
        results = [_sweep_cell(*job) for job in todo]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_sweep_cell, *zip(*todo)))
    for cell_dir, _, err in results:
        if err:
            failures[cell_dir] = err
            log.error("cell %s failed: %s", cell_dir, err)

    rows, per_variant = [], {}
    for variant, seed, order, cell_dir in cells:
        row = {"variant": variant, "seed": seed, "order": "" if order is None else order,
               "status": "ok", "avg-incremental-accuracy": "", "final-base-accuracy": "", "mean": "", "variance": ""}
        metrics = Path(cell_dir) / "metrics.json"
        if cell_dir in failures or not metrics.exists():
            row["status"] = "failed"
        else:
            m = json.loads(metrics.read_text())
            row["avg-incremental-accuracy"] = m["avg-incremental-accuracy"]
            row["final-base-accuracy"] = m["base-task-trace"][-1]
            per_variant.setdefault(variant, []).append(m["avg-incremental-accuracy"])
        rows.append(row)
    for variant in variants:
        vals = per_variant.get(variant, [])
        row = {"variant": variant, "seed": "all", "order": "all", "status": "aggregate",
               "avg-incremental-accuracy": "", "final-base-accuracy": "", "mean": "", "variance": ""}
        if len(vals) >= 2:
            row["mean"], row["variance"] = aggregate_orders(vals)
        elif vals:
            row["mean"] = vals[0]
        rows.append(row)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"{len(cells)} cells, {len(failures)} failed  ->  {out / 'summary.csv'}")
    return EXIT_RUNTIME if failures else EXIT_OK


# ---------------------------------------------------------------------------
# compress


def cmd_compress(args) -> int:
    try:
        teacher = MLPClassifier.load(args.teacher, frozen=True)
    except (OSError, FormatError) as exc:
        raise UsageFailure(f"--teacher: {exc}") from None
    resolved = _resolve(args.config, args.override)
    cfg = from_dict(resolved)
    train, test = load_datasets(cfg)
    n_classes = teacher.n_classes
    if args.pseudo_tasks < 1 or n_classes % args.pseudo_tasks:
        raise UsageFailure(f"--pseudo-tasks: {n_classes} classes cannot be split into {args.pseudo_tasks} equal parts")
    seeds = _parse_list(args.seeds, int, "--seeds") if args.seeds else [cfg.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved-config.json", resolved)
    results = [run_compression(teacher, cfg, train, test, args.pseudo_tasks, args.variant, s) for s in seeds]
    report = {
        "pseudo-tasks": args.pseudo_tasks,
        "variant": args.variant,
        "seeds": seeds,
        "runs": results,
        "student-acc-mean": float(np.mean([r["variant"]["student-acc"] for r in results])),
        "control-acc-mean": float(np.mean([r["control"]["student-acc"] for r in results])),
        "teacher-acc": results[0]["teacher-acc"],
    }
    _write_json(out / "compress.json", report)
    print(
        f"{args.variant} student {report['student-acc-mean']:.2f}  plain-KD student "
        f"{report['control-acc-mean']:.2f}  teacher {report['teacher-acc']:.2f}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate-config / make-fixtures


def cmd_validate_config(args) -> int:
    resolved = _resolve(args.config, args.override)
    print(json.dumps(resolved, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_make_fixtures(args) -> int:
    """Small configs and data files for trying every subcommand."""
    out = Path(args.out).resolve()
    out.mkdir(parents=True, exist_ok=True)

    tiny = json.loads(json.dumps(BENCHMARK_PRESET))
    tiny.update({"epochs-base": 3, "epochs-inc": 2, "num-increments": 2})
    tiny["dataset"]["samples-per-class"] = 20
    tiny["evaluation"] = {"draws-per-sigma": 4}
    _write_json(out / "tiny.json", tiny)
    _write_json(out / "benchmark.json", BENCHMARK_PRESET)

    train, test = generate_blobs(4, 36, 10, 3.0, 0.5, seed=0)
    cache = out / "cache"
    save_cache(train, cache, "train")
    save_cache(test, cache, "test")
    cache_cfg = {**tiny, "total-classes": 4, "num-increments": 2,
                 "dataset": {"kind": "cache", "train-manifest": str(cache / "train.json"),
                             "test-manifest": str(cache / "test.json")}}
    _write_json(out / "cache.json", cache_cfg)

    idx = out / "idx"
    idx.mkdir(exist_ok=True)
    for split, ds in (("train", train), ("test", test)):
        lo, hi = ds.inputs.min(), ds.inputs.max()
        pixels = np.round(255 * (ds.inputs - lo) / (hi - lo)).astype(np.uint8).reshape(len(ds), 6, 6)
        write_idx_images(idx / f"{split}-images-idx3-ubyte", pixels)
        write_idx_labels(idx / f"{split}-labels-idx1-ubyte", ds.labels)
    idx_cfg = {**cache_cfg, "dataset": {
        "kind": "idx",
        "train-images": str(idx / "train-images-idx3-ubyte"), "train-labels": str(idx / "train-labels-idx1-ubyte"),
        "test-images": str(idx / "test-images-idx3-ubyte"), "test-labels": str(idx / "test-labels-idx1-ubyte"),
    }}
    _write_json(out / "idx.json", idx_cfg)

    student = json.loads(json.dumps(COMPRESS_PRESET))
    student["epochs-base"] = 5
    _write_json(out / "student.json", student)
    cfg = from_dict(student)
    tr, _ = load_datasets(cfg)
    train_teacher(cfg, tr, COMPRESS_TEACHER_DIMS, seed=100).save(out / "teacher.ckpt")
    print(f"fixtures written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cldistill", description="Class-incremental distillation experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="JSON config file (kebab-case keys)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, value parsed as JSON (repeatable)")

    p = sub.add_parser("run", help="run one experiment")
    with_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run variants x seeds x orders")
    with_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", help="comma-separated distillation variants")
    p.add_argument("--seeds", help="comma-separated training seeds")
    p.add_argument("--orders", type=int, help="number of random class orders (order seeds 0..n-1)")
    p.add_argument("--parallel", type=int, help="concurrent runs (default: cores - 1)")
    p.add_argument("--resume", action="store_true", help="skip cells that already have metrics.json")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compress", help="distil a teacher checkpoint into a smaller student")
    with_config(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--pseudo-tasks", type=int, default=4)
    p.add_argument("--variant", choices=("rdkd", "plain"), default="rdkd")
    p.add_argument("--seeds", help="comma-separated student seeds")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("validate-config", help="check a config and print it with defaults filled in")
    with_config(p)
    p.set_defaults(func=cmd_validate_config)

    p = sub.add_parser("make-fixtures", help="write small configs, data files and a teacher checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_fixtures)
    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("CLDISTILL_LOG", "error").lower()
    if level_name not in LOG_LEVELS:
        raise UsageFailure(f"CLDISTILL_LOG: expected one of {', '.join(LOG_LEVELS)}, got {level_name!r}")
    logging.basicConfig(level=LOG_LEVELS[level_name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_logging()
        return args.func(args)
    except ConfigError as exc:
        print("config error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_USAGE
    except UsageFailure as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("%s", traceback.format_exc())
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
