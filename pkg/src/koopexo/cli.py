"""Command line entry point: ``koopexo {collect,train,eval,report,all}``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, load_config
from .experiments import run_collection, run_control_eval, run_training, write_manifest

log = logging.getLogger("koopexo")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_collect(cfg, out):
    paths = run_collection(cfg, out)
    print(f"wrote {len(paths)} episode logs to {out / 'episodes'}")


def cmd_train(cfg, out):
    paths = run_training(cfg, out)
    print(f"wrote {len(paths)} models to {out / 'models'}")


def cmd_eval(cfg, out):
    write_manifest(cfg, out)
    paths = run_control_eval(cfg, out)
    print(f"wrote {len(paths)} evaluation logs to {out / 'eval'}")


def cmd_report(cfg, out):
    from .report import collect_metrics, emit_report, render_tables

    report = collect_metrics(cfg, out)
    paths = emit_report(report, cfg, out)
    sys.stdout.write(render_tables(report, cfg))
    print(f"\nwrote {len(paths)} report files to {out / 'report'}")


def cmd_all(cfg, out):
    for step in (cmd_collect, cmd_train, cmd_eval, cmd_report):
        step(cfg, out)


COMMANDS = {"collect": cmd_collect, "train": cmd_train, "eval": cmd_eval,
            "report": cmd_report, "all": cmd_all}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="koopexo",
                                     description="Simulated Koopman-MPC knee exoskeleton study.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__name__.replace("cmd_", "run stage: "))
        p.add_argument("--config", type=Path, help="key = value settings file")
        p.add_argument("--out", type=Path, default=Path("koopexo_out"), help="output directory")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args.out)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"koopexo {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
