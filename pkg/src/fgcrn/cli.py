"""Command-line interface.

    fgcrn simulate --scenario <file> --out <dir>
    fgcrn train    --data <dir> [--config <file>] --out <dir> [ablation flags]
    fgcrn eval     --model <dir> --data <dir> [--methods m1,m2] --report <file>
    fgcrn project  --model <dir> --data <dir> --out <file>

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .config import load_run_config
from .data.dataset_io import load_simulation_task
from .errors import FgcrnError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fgcrn",
        description="Open-set fault diagnosis for multimode processes")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="simulate a CSTR dataset directory")
    p_sim.add_argument("--scenario", required=True, help="scenario key-value file")
    p_sim.add_argument("--out", required=True, help="output dataset directory")

    p_train = sub.add_parser("train", help="train a model on a dataset directory")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--config", default=None, help="run-config key-value file")
    p_train.add_argument("--out", required=True, help="output model directory")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--hidden", type=int, default=None)
    p_train.add_argument("--quiet", action="store_true")
    # ablation switches
    p_train.add_argument("--no-tam", action="store_true",
                         help="drop the temporal attention module")
    p_train.add_argument("--gru-unidirectional", action="store_true",
                         help="forward recurrence only")
    p_train.add_argument("--norm", choices=("both", "bn", "sain"), default=None)
    p_train.add_argument("--lambda-dist", type=float, default=None)
    p_train.add_argument("--clusters", default=None,
                         help="cluster count per class, or 'auto'")

    p_eval = sub.add_parser("eval", help="evaluate a trained model")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--methods", default=",".join(pipeline.ALL_METHODS),
                        help="comma-separated method list")
    p_eval.add_argument("--report", required=True, help="output report (.json)")
    p_eval.add_argument("--config", default=None)

    p_proj = sub.add_parser("project", help="export a 2-D feature projection")
    p_proj.add_argument("--model", required=True)
    p_proj.add_argument("--data", required=True)
    p_proj.add_argument("--out", required=True, help="output CSV path")
    return parser


def _train_overrides(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.hidden is not None:
        overrides["hidden"] = args.hidden
    if args.no_tam:
        overrides["use_tam"] = False
    if args.gru_unidirectional:
        overrides["bidirectional"] = False
    if args.norm is not None:
        overrides["norm"] = args.norm
    if args.lambda_dist is not None:
        overrides["lambda_dist"] = args.lambda_dist
    if args.clusters is not None:
        overrides["clusters"] = str(args.clusters)
    return overrides


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            task = load_simulation_task(args.scenario)
            manifest = pipeline.simulate_dataset(task, args.out)
            counts = manifest["counts"]
            print(f"wrote {args.out}: train={counts['train']} "
                  f"val={counts['val']} test={counts['test']}")
        elif args.command == "train":
            cfg = load_run_config(path=args.config, overrides=_train_overrides(args))
            meta = pipeline.train(args.data, cfg, args.out, quiet=args.quiet)
            print(f"wrote {args.out}: best epoch {meta['best_epoch']} "
                  f"val_acc={meta['best_val_acc']:.4f} "
                  f"threshold={meta['threshold']:.6g}")
        elif args.command == "eval":
            cfg = load_run_config(path=args.config)
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
            report = pipeline.evaluate(args.model, args.data, methods,
                                       args.report, cfg)
            for row in report["rows"]:
                print(f"{row['method']:>9}: ACC={row['acc']:.4f} "
                      f"FAR={row['far']:.4f} FRR={row['frr']:.4f}")
        elif args.command == "project":
            n = pipeline.export_projection(args.model, args.data, args.out)
            print(f"wrote {args.out}: {n} rows")
    except FgcrnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
