"""Command line entry point.

    drivefusion gen-synth  --config cfg [--out DIR] [--seed N]
    drivefusion preprocess --config cfg
    drivefusion train      --config cfg
    drivefusion predict    --config cfg --checkpoint CKPT [--split test] [--out-csv PATH]
    drivefusion ensemble   --config cfg --spec SPEC --store DIR [--out-csv PATH]
    drivefusion evaluate   --config cfg --pred CSV --truth CSV [--zones]
    drivefusion report     --config cfg [--run DIR] [--metrics CSV]

Every flag can also come from the config file or a DRIVEFUSION_<KEY>
environment variable; command-line values win. Failures exit nonzero with a
single machine-parsable line: ``error class=<ExceptionName> msg="..."``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import RunConfig, load_run_config
from .errors import PipelineError
from .evaluate import format_metric_table, read_metrics_csv
from .train import read_loss_log


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drivefusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=Path, default=None, help="Flat key = value config file")
        p.add_argument("--preset", default=None, help="Sampling preset (full|sample1|sample2|sample3|tiny|custom)")
        p.add_argument("--seed", type=int, default=None, help="Master seed")
        p.add_argument("--out", type=Path, default=None, help="Run output directory")
        p.add_argument("--dataset-root", type=Path, default=None, help="Dataset root directory")

    add_common(sub.add_parser("gen-synth", help="Generate a synthetic dataset"))
    add_common(sub.add_parser("preprocess", help="Build per-chapter caches and truth CSVs"))
    add_common(sub.add_parser("train", help="Train a model; one checkpoint per epoch"))

    p = sub.add_parser("predict", help="Write denormalized predictions for a split")
    add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out-csv", type=Path, default=None)

    p = sub.add_parser("ensemble", help="Likelihood-weighted combination of member predictions")
    add_common(p)
    p.add_argument("--spec", type=Path, required=True, help="Ensemble spec JSON")
    p.add_argument("--store", type=Path, required=True, help="Prediction store: <store>/<model>/epoch<k>.csv")
    p.add_argument("--out-csv", type=Path, default=None)

    p = sub.add_parser("evaluate", help="Score a prediction CSV against a truth CSV")
    add_common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--zones", action="store_true", help="Add the per-zone breakdown (needs the cache)")

    p = sub.add_parser("report", help="Render loss curves and zone charts from run artifacts")
    add_common(p)
    p.add_argument("--run", type=Path, default=None, help="Run directory (default: --out)")
    p.add_argument("--metrics", type=Path, default=None, help="metrics.csv to chart (default: <run>/eval/metrics.csv)")

    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    if args.preset is not None:
        overrides["preset"] = args.preset
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.dataset_root is not None:
        overrides["dataset_root"] = args.dataset_root
    return load_run_config(args.config, overrides)


def run_command(args: argparse.Namespace) -> int:
    from . import pipeline

    cfg = _config_from_args(args)

    if args.command == "gen-synth":
        records = pipeline.run_gen_synth(cfg)
        counts = {s: sum(1 for r in records if r[2] == s) for s in ("train", "val", "test")}
        print(f"generated {len(records)} chapters under {cfg.dataset_root} (splits: {counts})")
    elif args.command == "preprocess":
        outputs = pipeline.run_preprocess(cfg)
        print(f"cache written to {outputs['cache']}")
        for split in ("train", "val", "test"):
            print(f"truth_{split}: {outputs[split]}")
    elif args.command == "train":
        results = pipeline.run_train(
            cfg,
            log_fn=lambda log: print(
                f"epoch {log.epoch}: total {log.total_loss:.6f} "
                f"(angle {log.angle_mse:.6f}, speed {log.speed_mse:.6f}) in {log.seconds:.1f}s"
            ),
        )
        print(f"{len(results)} checkpoints under {cfg.out}")
    elif args.command == "predict":
        out_csv = args.out_csv or Path(cfg.out) / "predictions" / f"{args.checkpoint.stem}_{args.split}.csv"
        path = pipeline.run_predict(cfg, args.checkpoint, args.split, out_csv)
        print(f"predictions written to {path}")
    elif args.command == "ensemble":
        out_csv = args.out_csv or Path(cfg.out) / "predictions" / "ensemble.csv"
        path = pipeline.run_ensemble(cfg, args.spec, args.store, out_csv)
        print(f"ensemble predictions written to {path}")
    elif args.command == "evaluate":
        report = pipeline.run_evaluate(cfg, args.pred, args.truth, Path(cfg.out) / "eval", zones=args.zones)
        print(format_metric_table(report))
        print(f"metrics written to {Path(cfg.out) / 'eval' / 'metrics.csv'}")
    elif args.command == "report":
        from .report import emit_report

        run_dir = args.run or Path(cfg.out)
        logs = None
        loss_log = run_dir / "loss_log.csv"
        if loss_log.is_file():
            logs = read_loss_log(loss_log)
        metrics_path = args.metrics or (run_dir / "eval" / "metrics.csv")
        metric_report = read_metrics_csv(metrics_path) if metrics_path.is_file() else None
        written = emit_report(run_dir / "report", report=metric_report, logs=logs)
        if not written:
            raise PipelineError(f"nothing to report under {run_dir} (no loss_log.csv or metrics.csv)")
        for p in written:
            print(f"wrote {p}")
    else:  # unreachable with required=True
        raise PipelineError(f"unknown command {args.command!r}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except (PipelineError, OSError) as e:
        message = str(e).replace('"', "'").replace("\n", " ")
        print(f'error class={type(e).__name__} msg="{message}"', file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
