"""``pap`` command-line interface.

All experiment settings live in one JSON config; flags only override the
seed, the output directory and how much runs in parallel. Failures print a
single JSON object to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from .pipeline import (
    PipelineError,
    Workspace,
    gen_data,
    load_config,
    run_analyze_ga,
    run_attacks,
    run_evaluate,
    run_finetune,
    run_pipeline,
    run_pretrain,
    run_report,
)

SUBCOMMANDS = ("gen-data", "pretrain", "finetune", "attack", "evaluate", "analyze-ga", "report", "pipeline")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("--jobs must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (default: the bundled desk config)")
    common.add_argument("--seed", type=_u64, help="override the config seed")
    common.add_argument("--output", help="override the config output_dir")
    common.add_argument("--jobs", type=_positive, default=1, help="parallel workers for finetune/attack")
    common.add_argument("--sequential", action="store_true", help="force --jobs 1 (the determinism reference)")
    common.add_argument("--force", action="store_true", help="accept inputs produced under another config hash")

    parser = argparse.ArgumentParser(prog="pap", description="Pre-trained adversarial perturbation experiments.")
    parser.add_argument("--version", action="version", version=f"pap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic datasets")
    sub.add_parser("pretrain", parents=[common], help="train the backbone on the pretrain dataset")
    p = sub.add_parser("finetune", parents=[common], help="fine-tune a copy per downstream dataset")
    p.add_argument("--datasets", nargs="+", help="subset of downstream dataset names")
    p = sub.add_parser("attack", parents=[common], help="craft perturbations on the pre-trained model")
    p.add_argument("--methods", nargs="+", help="subset of attack labels")
    sub.add_parser("evaluate", parents=[common], help="score every perturbation on every fine-tuned model")
    sub.add_parser("analyze-ga", parents=[common], help="gradient alignment of the recorded traces")
    p = sub.add_parser("report", parents=[common], help="best-over-checkpoints ASR table")
    p.add_argument("--inputs", nargs="*", default=[], help="extra eval CSVs to merge")
    sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("PAP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def run(args) -> dict:
    cfg = load_config(args.config, seed=args.seed, output_dir=args.output)
    jobs = 1 if args.sequential else args.jobs
    ws = Workspace(cfg, force=args.force)
    cmd = args.command
    if cmd == "pipeline":
        return run_pipeline(cfg, jobs=jobs, force=args.force).to_dict()
    if cmd == "gen-data":
        return {"manifests": [str(p) for p in gen_data(ws)]}
    if cmd == "pretrain":
        return {"checkpoint": str(run_pretrain(ws))}
    if cmd == "finetune":
        return {"finetuned": run_finetune(ws, jobs, args.datasets)}
    if cmd == "attack":
        return {"perturbations": run_attacks(ws, jobs, args.methods)}
    if cmd == "evaluate":
        return {"eval": str(run_evaluate(ws))}
    if cmd == "analyze-ga":
        path = run_analyze_ga(ws)
        return json.loads(path.read_text())
    if cmd == "report":
        csv_path, json_path = run_report(ws, args.inputs)
        return {"report_csv": str(csv_path), "report_json": str(json_path)}
    raise AssertionError(cmd)


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        out = run(args)
    except PipelineError as exc:
        print(json.dumps({"command": args.command, **exc.to_json()}), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # surfaced as JSON, never as a bare traceback
        logging.getLogger("pap").debug("unhandled error", exc_info=True)
        print(json.dumps({"command": args.command, "error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
