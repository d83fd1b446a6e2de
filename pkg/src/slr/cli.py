"""Command-line entry point: ``slr {gen,train,eval,ablate,smooth-grid,report}``.

Every command takes ``--config PATH --out DIR --seed N --threads K --force``.
Failures print one JSON line ``{"error": <category>, "message": ...}`` to
stderr and exit with a category-specific nonzero code.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import Config, ConfigError, load_config
from .dataset import DataError, read_dataset, write_dataset
from .diffcore import CheckpointError, TorchModel, load_checkpoint
from .evaluation import (
    FRAME_COLUMNS,
    METRIC_COLUMNS,
    EvaluationError,
    aggregate,
    evaluate,
    evaluate_frames,
    frame_rows,
)
from .parallel import resolve_threads
from .pipeline import ABLATION_FLAGS, prepare_samples, run_ablation, run_slr, smoothing_baseline, write_csv

log = logging.getLogger("slr")

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "exists": 5, "io": 6, "evaluation": 7, "internal": 10}
DEFAULT_ALPHAS = (0.0, 0.1, 0.2, 0.3)
DEFAULT_SIGMAS = (0.0, 1.0, 2.0)
SMOOTHING_COLUMNS = ("method", "alpha", "sigma", "f1", "f1_d", "pr_d", "re_d", "miou")


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--seed", type=int, help="seed override (data seed for gen, training seed otherwise)")
    common.add_argument("--threads", type=int, help="worker threads for per-scene work (default: $SLR_THREADS or 1)")
    common.add_argument("--force", action="store_true", help="overwrite a completed output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="slr", description="Weakly supervised maritime segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")

    p = sub.add_parser("train", parents=[common], help="warm-up, pseudo labels and fine-tuning")
    p.add_argument("--data", type=Path, required=True, help="dataset directory written by gen")
    p.add_argument("--dump-labels", action="store_true", help="write partial and pseudo label dumps under OUT/labels")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--frame-table", action="store_true", help="also write per-frame detail to frames.csv")

    p = sub.add_parser("ablate", parents=[common], help="run the seven ablation rows")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("smooth-grid", parents=[common], help="label-smoothing baseline grid against SLR")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--alphas", type=_float_list, default=DEFAULT_ALPHAS)
    p.add_argument("--sigmas", type=_float_list, default=DEFAULT_SIGMAS)
    p.add_argument("--slr-run", type=Path, help="reuse the final metrics of a finished train run")

    p = sub.add_parser("report", parents=[common], help="merge metrics.csv files of finished runs")
    p.add_argument("runs", nargs="+", type=Path)
    return parser


def _load_cfg(args) -> Config:
    cfg = load_config(args.config)
    if args.seed is not None:
        key = "data_seed" if args.command == "gen" else "seed"
        cfg = cfg.replace(**{key: args.seed})
    return cfg.validate()


def _prepare_out(out: Path, marker: str, force: bool) -> None:
    if (out / marker).exists() and not force:
        raise CliError("exists", f"{out} already holds a completed run ({marker}); use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _test_scenes(data: Path, threads: int):
    train, test = read_dataset(data, threads)
    return train, [r.scene for r in test]


def cmd_gen(args, cfg: Config, threads: int) -> None:
    _prepare_out(args.out, "manifest.json", args.force)
    manifest = write_dataset(cfg, args.out, threads)
    log.info("wrote %d train and %d test scenes to %s", manifest["counts"]["train"], manifest["counts"]["test"], args.out)


def cmd_train(args, cfg: Config, threads: int) -> None:
    _prepare_out(args.out, "run.json", args.force)
    train, test = _test_scenes(args.data, threads)
    _, record = run_slr(prepare_samples(train, cfg), test, cfg, args.out, threads, dump_labels=args.dump_labels)
    for row in record.metrics:
        log.info("%s: f1=%.3f f1_d=%.3f mu_r=%.3f", row["stage"], row["f1"], row["f1_d"], row["mu_r"])


def cmd_eval(args, cfg: Config, threads: int) -> None:
    _prepare_out(args.out, "eval.json", args.force)
    _, test = read_dataset(args.data, threads)
    frames = evaluate_frames(TorchModel(load_checkpoint(args.checkpoint)), [r.scene for r in test], cfg.eval, threads)
    report = aggregate(frames)
    if args.frame_table:
        rows = [{"scene": r.name, **row} for r, row in zip(test, frame_rows(frames))]
        write_csv(args.out / "frames.csv", ["scene", *FRAME_COLUMNS], rows)
    (args.out / "eval.json").write_text(json.dumps(report.as_dict(), indent=1))
    write_csv(args.out / "metrics.csv", ["stage", *METRIC_COLUMNS], [{"stage": "eval", **report.as_dict()}])


def cmd_ablate(args, cfg: Config, threads: int) -> None:
    _prepare_out(args.out, "ablation.csv", args.force)
    train, test = _test_scenes(args.data, threads)
    rows = run_ablation(train, test, cfg, args.out, threads)
    write_csv(args.out / "ablation.csv", ["row", *ABLATION_FLAGS, *METRIC_COLUMNS], rows)


def cmd_smooth_grid(args, cfg: Config, threads: int) -> None:
    _prepare_out(args.out, "smoothing.csv", args.force)
    train, test = _test_scenes(args.data, threads)
    rows = []
    for alpha in args.alphas:
        for sigma in args.sigmas:
            net = smoothing_baseline(train, alpha, sigma, cfg)
            rep = evaluate(TorchModel(net), test, cfg.eval, threads).as_dict()
            rows.append({"method": "smoothing", "alpha": alpha, "sigma": sigma, **rep})
            log.info("alpha=%.2f sigma=%.1f f1_d=%.3f", alpha, sigma, rep["f1_d"])
    if args.slr_run is not None:
        final = read_metrics(args.slr_run / "metrics.csv")[-1]
        ref = {k: float(final[k]) for k in METRIC_COLUMNS}
    else:
        _, record = run_slr(prepare_samples(train, cfg), test, cfg, args.out / "slr", threads)
        ref = record.metrics[-1]
    rows.append({"method": "slr", "alpha": "", "sigma": "", **ref})
    write_csv(args.out / "smoothing.csv", SMOOTHING_COLUMNS, rows)


def read_metrics(path: Path) -> list[dict]:
    if not path.exists():
        raise CliError("data", f"missing file {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    required = {"stage", *METRIC_COLUMNS}
    if not rows or not required <= set(rows[0]):
        raise CliError("data", f"{path}: malformed metrics table (need columns {', '.join(sorted(required))})")
    for i, row in enumerate(rows, start=2):
        for k in METRIC_COLUMNS:
            try:
                float(row[k])
            except (TypeError, ValueError):
                raise CliError("data", f"{path}: line {i}: column {k} is not a number") from None
    return rows


def cmd_report(args, cfg: Config, threads: int) -> None:
    _prepare_out(args.out, "report.csv", args.force)
    merged = []
    for run in args.runs:
        for row in read_metrics(run / "metrics.csv"):
            merged.append({"run": run.name or str(run), **row})
    write_csv(args.out / "report.csv", ["run", "stage", *METRIC_COLUMNS], merged)
    series_dir = args.out / "series"
    series_dir.mkdir(exist_ok=True)
    for metric in METRIC_COLUMNS:
        rows = [{"run": r["run"], "stage": r["stage"], "value": r[metric]} for r in merged]
        write_csv(series_dir / f"{metric}.csv", ["run", "stage", "value"], rows)


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "smooth-grid": cmd_smooth_grid,
    "report": cmd_report,
}

_CATEGORIES = (
    (ConfigError, "config"),
    (DataError, "data"),
    (CheckpointError, "data"),
    (EvaluationError, "evaluation"),
    (OSError, "io"),
)


def _fail(category: str, message: str) -> int:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return EXIT_CODES[category]


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CODES["usage"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        threads = resolve_threads(args.threads)
        cfg = _load_cfg(args)
        COMMANDS[args.command](args, cfg, threads)
    except CliError as exc:
        return _fail(exc.category, str(exc))
    except Exception as exc:  # noqa: BLE001 - every failure maps to a category
        for kind, category in _CATEGORIES:
            if isinstance(exc, kind):
                return _fail(category, str(exc))
        log.debug("unexpected failure", exc_info=True)
        return _fail("internal", f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
