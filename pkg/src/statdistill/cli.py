"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 missing or mismatched
artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import apply_flag_overrides, load_config
from .errors import ArtifactError, ConfigError, EngineError, NumericError
from . import pipeline

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_NUMERIC = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (merged over defaults)")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", default="runs/out", help="output root directory")
    parser.add_argument("--ipc", type=int, help="distilled images per class")
    parser.add_argument("--alpha", type=float, help="EMA decay for steered matching")
    parser.add_argument("--beta-dr", dest="beta_dr", type=float,
                        help="per-term drop probability for conv matching")
    parser.add_argument("--gamma", type=float, help="hard-label weight in evaluation loss")
    parser.add_argument("--tau-dd", dest="tau_dd", type=float,
                        help="spectrum loss temperature")
    parser.add_argument("--iterations", type=int, help="synthesis iterations")
    parser.add_argument("--ln", choices=("on", "off"), help="logit normalization")
    parser.add_argument("--wdd", type=float, help="spectrum loss weight")
    parser.add_argument("--wbn", type=float, help="BN matching loss weight")
    parser.add_argument("--wconv", type=float, help="conv matching loss weight")
    parser.add_argument("--batch-plan", dest="batch_plan",
                        choices=("original", "reorder"), help="synthesis batch plan")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="statdistill",
        description="Dataset condensation by multi-backbone statistical matching")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("pretrain", "train the backbone pool on the real dataset"),
        ("capture-stats", "record global conv statistics for each backbone"),
        ("synthesize", "optimize the distilled images"),
        ("relabel", "generate ensemble soft labels"),
        ("evaluate", "train a fresh model on the distilled set and score it"),
        ("pipeline", "run every stage in order"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
    diag = sub.add_parser("diag", help="print diversity diagnostics for a distilled set")
    diag.add_argument("--distilled", required=True, help="distilled dataset directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "diag":
            metrics = pipeline.stage_diag(Path(args.distilled))
            print(f"mean intra-class cosine similarity: {metrics['mean_cosine']:.6f}")
            print(f"mean per-class min Gram eigenvalue: {metrics['mean_min_eig']:.6g}")
            for c in sorted(metrics["per_class_cosine"]):
                print(f"  class {c}: cosine {metrics['per_class_cosine'][c]:.6f}  "
                      f"min eig {metrics['per_class_min_eig'][c]:.6g}")
            return EXIT_OK

        cfg = load_config(args.config)
        cfg = apply_flag_overrides(cfg, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)

        if args.command == "pretrain":
            accs = pipeline.stage_pretrain(cfg, out)
            for name, acc in accs.items():
                print(f"{name}: train accuracy {acc:.4f}")
        elif args.command == "capture-stats":
            hashes = pipeline.stage_capture(cfg, out)
            for name in hashes:
                print(f"{name}: bank written")
        elif args.command == "synthesize":
            dest = pipeline.stage_synthesize(cfg, out)
            print(f"distilled dataset written to {dest}")
        elif args.command == "relabel":
            dest = pipeline.stage_relabel(cfg, out)
            print(f"soft label store written to {dest}")
        elif args.command == "evaluate":
            result = pipeline.stage_evaluate(cfg, out)
            print(f"{result['model']}: top-1 accuracy {result['accuracy']:.4f}")
        elif args.command == "pipeline":
            result = pipeline.run_pipeline(cfg, out)
            print(f"pipeline complete; {result['model']}: top-1 accuracy "
                  f"{result['accuracy']:.4f}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (NumericError, EngineError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
