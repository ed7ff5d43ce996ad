"""Command line entry point: ``symdisc <stage> [flags]``.

Exit codes are 0 on success, 1 for numerical or internal failures and 2 for
usage or input errors.  Every error goes to stderr prefixed with ``error:``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .datasets import DatasetFormatError
from .experiments import (
    PRESETS,
    STAGES,
    ConfigError,
    ExperimentConfig,
    ReportVersionError,
    StageError,
    load_config,
    run_experiment,
    run_stage,
    run_sweep,
)
from .oracles import CheckpointError
from .spaces import SpecError

INPUT_ERRORS = (FileNotFoundError, ConfigError, DatasetFormatError, CheckpointError, SpecError,
                ReportVersionError, json.JSONDecodeError, KeyError, TypeError, ValueError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(2)


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="symdisc", description="Lie algebra symmetry discovery pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in STAGES + ("run", "sweep"):
        s = sub.add_parser(name, help=f"{name} stage" if name in STAGES else None)
        s.add_argument("--config", help="JSON config file (merged over its preset)")
        s.add_argument("--preset", choices=[x for x in PRESETS if x != "custom"])
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--policy", choices=["threshold", "gap"])
        s.add_argument("--tau", type=float)
        if name == "sweep":
            s.add_argument("--seeds", type=_seed_list, required=True,
                           help="comma separated seeds, e.g. 0,1,2")
    return p


def config_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
        d = cfg.to_dict()
        if args.preset and args.preset != cfg.preset:
            raw = json.loads(open(args.config).read())
            if "preset" in raw:
                raise ConfigError(f"--preset {args.preset} conflicts with config preset {cfg.preset}")
            raw["preset"] = args.preset
            d = ExperimentConfig.from_dict(raw).to_dict()
    elif args.preset:
        d = ExperimentConfig.preset_config(args.preset).to_dict()
    else:
        raise ConfigError("one of --config or --preset is required")
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out_dir"] = args.out
    if args.policy is not None:
        d["discovery"]["policy"] = args.policy
    if args.tau is not None:
        if not args.tau > 0:
            raise ConfigError("--tau must be positive")
        d["discovery"]["tau"] = args.tau
    return ExperimentConfig.from_dict(d)


def _fail(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    user_error = isinstance(cause, INPUT_ERRORS)
    sys.stderr.write(f"error: {cause if user_error else exc}\n")
    return 2 if user_error else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "run":
            report = run_experiment(cfg)
            summary = {"out": cfg.out_dir, "dimension": report["discovery"]["dimension"],
                       "E_space": report["metrics"]["E_space"]}
        elif args.command == "sweep":
            agg = run_sweep(cfg, args.seeds)
            summary = {"out": cfg.out_dir, "n_ok": agg["n_ok"], "E_space": agg["E_space"]}
        else:
            run_stage(cfg, args.command)
            summary = {"out": cfg.out_dir, "stage": args.command}
    except Exception as exc:
        return _fail(exc)
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
