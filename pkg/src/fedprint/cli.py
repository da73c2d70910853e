"""Command-line front door.

Subcommands: ``generate`` (synthetic dataset), ``train`` (centralized or
federated run), ``attack-matrix`` (the full poisoning grid), ``eval``
(checkpoint + dataset -> accuracy), ``report`` (re-render figures for an
existing run directory).

Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 runtime failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import config as config_mod
from . import experiment, report
from .errors import (
    AggregationError,
    ConfigurationError,
    DatasetFormatError,
    FedprintError,
    InvalidInputError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedprint",
        description=(
            "Device-model identification from execution-time fingerprints: "
            "synthetic data generation, centralized and federated training, "
            "and the label-flipping attack matrix."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", help="build the synthetic dataset CSV")
    generate.add_argument("--config", help="JSON config file (defaults built in)")
    generate.add_argument("--out", required=True, help="output CSV path")
    generate.add_argument("--seed", type=int, help="override corpus seed")

    train = sub.add_parser("train", help="run one training pipeline")
    train.add_argument("--dataset", required=True, help="dataset CSV path")
    train.add_argument("--config", help="JSON config file")
    train.add_argument(
        "--mode", required=True, choices=("centralized", "federated")
    )
    train.add_argument("--out-dir", required=True, help="artifact directory")
    train.add_argument("--seed", type=int, help="override the training seed")
    train.add_argument(
        "--no-plots", action="store_true", help="skip figure rendering"
    )
    train.add_argument("--quiet", action="store_true", help="no progress lines")

    matrix = sub.add_parser(
        "attack-matrix", help="run every (aggregator, malicious count, fraction) cell"
    )
    matrix.add_argument("--dataset", required=True)
    matrix.add_argument("--config", help="JSON config file")
    matrix.add_argument("--out-dir", required=True)
    matrix.add_argument(
        "--parallel",
        type=int,
        default=0,
        metavar="N",
        help="run cells in N worker processes (default: sequential)",
    )
    matrix.add_argument(
        "--replicates",
        type=int,
        default=None,
        metavar="N",
        help="run every cell with N consecutive seeds and report mean/std",
    )
    matrix.add_argument("--no-plots", action="store_true")
    matrix.add_argument("--quiet", action="store_true")

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--config", help="JSON config (reader mapping)")
    evaluate.add_argument("--out-dir", help="also write confusion.csv here")

    rep = sub.add_parser("report", help="render figures for an existing run")
    rep.add_argument("--run-dir", required=True)
    return parser


def _apply_overrides(config: dict, args: argparse.Namespace) -> dict:
    if getattr(args, "seed", None) is not None:
        if args.command == "generate":
            config["corpus"]["seed"] = args.seed
        else:
            config["scenario"]["seed"] = args.seed
            config["centralized"]["seed"] = args.seed
    return config


def _progress(quiet: bool):
    if quiet:
        return None
    return lambda line: print(line, flush=True)


def run(args: argparse.Namespace) -> int:
    config = config_mod.load_config(getattr(args, "config", None))
    config = _apply_overrides(config, args)

    if args.command == "generate":
        counts = experiment.cmd_generate(config, args.out)
        total = sum(counts.values())
        for model, count in counts.items():
            print(f"{model}: {count} rows")
        print(f"wrote {total} rows to {args.out}")
        return EXIT_OK

    if args.command == "train":
        rows = experiment.load_rows(args.dataset, config)
        if args.mode == "centralized":
            metrics = experiment.train_centralized(
                rows, config, args.out_dir, progress=_progress(args.quiet)
            )
        else:
            metrics = experiment.train_federated(
                rows, config, args.out_dir, progress=_progress(args.quiet)
            )
        if not args.no_plots:
            report.render_run_report(args.out_dir)
        accuracy = metrics["final"]["test_accuracy"]
        print(f"{args.mode} test accuracy: {accuracy:.6f}")
        print(f"artifacts in {args.out_dir}")
        return EXIT_OK

    if args.command == "attack-matrix":
        rows = experiment.load_rows(args.dataset, config)
        matrix = experiment.run_attack_matrix(
            rows,
            config,
            args.out_dir,
            parallel=args.parallel,
            replicates=args.replicates,
            progress=_progress(args.quiet),
        )
        if not args.no_plots:
            report.render_run_report(args.out_dir)
        failed = [c["cell_id"] for c in matrix["cells"] if "error" in c]
        print(f"{len(matrix['cells'])} cells recorded, {len(failed)} failed")
        if failed:
            print("failed cells: " + ", ".join(failed))
        print(f"artifacts in {args.out_dir}")
        return EXIT_OK

    if args.command == "eval":
        rows = experiment.load_rows(args.dataset, config)
        accuracy, confusion = experiment.evaluate_checkpoint(args.checkpoint, rows)
        print(f"accuracy: {accuracy:.6f}")
        print("confusion (rows = true, columns = predicted):")
        for row in confusion:
            print("  " + " ".join(f"{v:8d}" for v in row))
        if args.out_dir:
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            experiment.write_confusion_csv(out / "confusion.csv", confusion)
            print(f"wrote {out / 'confusion.csv'}")
        return EXIT_OK

    if args.command == "report":
        produced = report.render_run_report(args.run_dir)
        for path in produced:
            print(f"wrote {path}")
        return EXIT_OK

    raise AssertionError(f"unhandled command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvalidInputError, AggregationError, FedprintError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
