"""Command-line entry point: ``trajstyle <subcommand> [--config run.json] [--seed S] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import RunConfig, profile
from .trajdata import DataError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

STAGES = {
    "simulate": lambda rc, run, a: pipeline.stage_simulate(rc, run, a.count, a.jobs),
    "gen-target": lambda rc, run, a: pipeline.stage_gen_target(rc, run, a.count, a.jobs),
    "train-vae": lambda rc, run, a: pipeline.stage_train_vae(rc, run),
    "distill": lambda rc, run, a: pipeline.stage_distill(rc, run),
    "pair": lambda rc, run, a: pipeline.stage_pair(rc, run),
    "transfer": lambda rc, run, a: pipeline.stage_transfer(rc, run),
    "adapt": lambda rc, run, a: pipeline.stage_adapt(rc, run, a.tag),
    "evaluate": lambda rc, run, a: pipeline.stage_evaluate(rc, run, a.tag),
    "report": lambda rc, run, a: pipeline.stage_report(rc, run, a.tag),
    "sweep-weights": lambda rc, run, a: pipeline.stage_sweep(rc, run),
    "grad-check": lambda rc, run, a: pipeline.stage_grad_check(rc, run, a.trials),
}
RUN_ALL = ("simulate", "gen-target", "train-vae", "distill", "pair", "transfer", "adapt", "evaluate", "report")


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration JSON")
    common.add_argument("--profile", choices=("paper", "smoke"), default="paper",
                        help="built-in profile used when --config is absent")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for episode generation")
    common.add_argument("--tag", default="", help="suffix for adapt/evaluate/report output directories")
    common.add_argument("--count", type=int, help="trajectory count for simulate/gen-target")
    common.add_argument("--trials", type=int, default=20, help="instances per kind for grad-check")
    common.add_argument("-v", "--verbose", action="store_true")
    p = UsageParser(prog="trajstyle", description="Trajectory style-transfer adaptation pipeline")
    sub = p.add_subparsers(dest="command", required=True, parser_class=UsageParser)
    for name in (*STAGES, "run-all"):
        sub.add_parser(name, parents=[common])
    ic = sub.add_parser("init-config", help="write a profile's configuration to a file")
    ic.add_argument("--profile", choices=("paper", "smoke"), default="smoke")
    ic.add_argument("path", type=Path)
    return p


def resolve_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if args.config else profile(args.profile)
    if args.seed is not None:
        rc = replace(rc, seed=args.seed)
    return rc


def run_stage(name: str, rc: RunConfig, run: Path, args) -> dict:
    run.mkdir(parents=True, exist_ok=True)
    pipeline._CURRENT_HASH[str(run)] = rc.hash()
    cfg_path = run / "config.json"
    if not cfg_path.exists():
        rc.save(cfg_path)
    elif RunConfig.load(cfg_path).hash() != rc.hash():
        logging.getLogger("trajstyle").warning("config differs from %s; stage outputs will mix configs", cfg_path)
    started = time.time()
    t0 = time.perf_counter()
    result = STAGES[name](rc, run, args)
    wall = time.perf_counter() - t0
    pipeline.write_manifest(run, rc)
    pipeline.append_runlog(run, {"stage": name, "config_hash": rc.hash(), "seed": rc.seed,
                                 "started": started, "wall_time": wall})
    return result


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "init-config":
            profile(args.profile).save(args.path)
            return EXIT_OK
        rc = resolve_config(args)
        names = RUN_ALL if args.command == "run-all" else (args.command,)
        for name in names:
            res = run_stage(name, rc, args.out, args)
            print(json.dumps({"stage": name, "result": _brief(res)}, sort_keys=True, default=str))
    except (DataError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"trajstyle: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"trajstyle: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"trajstyle: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def _brief(res):
    if isinstance(res, dict):
        return {k: v for k, v in res.items() if k != "rows"}
    return res


if __name__ == "__main__":
    sys.exit(main())
