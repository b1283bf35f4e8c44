"""Command-line entry point: ``advforensics <subcommand> --config FILE --out DIR [--seed N]``.

On failure a JSON object ``{"error": ..., "type": ..., "command": ...}`` is
printed to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import ExperimentConfig, PipelineError, check_output_dir, run_pipeline, train_all
from .synthdata import export_dataset, generate_corpus

COMMANDS = ("gen-corpus", "train", "benign", "whitebox", "transfer", "degrade-sweep", "defense")
EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advforensics", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="JSON experiment config (defaults apply when omitted)")
        sp.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="override global_seed")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.global_seed = args.seed
    if args.out is not None:
        cfg.output_dir = str(args.out)
    return cfg


def execute(args) -> dict:
    cfg = load_config(args)
    cfg.validate()
    out = check_output_dir(cfg.output_dir)
    if args.command == "gen-corpus":
        images = generate_corpus(cfg.corpus_spec())
        export_dataset(images, out / "corpus", manifest=True)
        return {"command": args.command, "images": len(images), "path": str(out / "corpus")}
    if args.command == "train":
        paths = train_all(cfg, out)
        return {"command": args.command, "checkpoints": [str(p) for p in paths]}
    rep = run_pipeline(args.command, cfg, out)
    return {"command": args.command, "rows": len(rep.rows), "config_hash": rep.provenance["config_hash"],
            "out": str(out)}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        summary = execute(args)
    except (PipelineError, ValueError, KeyError, TypeError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__, "command": args.command}), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure becomes machine-readable
        print(json.dumps({"error": str(exc), "type": type(exc).__name__, "command": args.command}), file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
