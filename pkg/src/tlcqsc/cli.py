"""Command-line front end for batch experiments."""
from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError
from .experiment import ADVERSARIES, ExperimentConfig, ViolationFound, render, run_experiment

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG = 0, 2, 3

# flag dest -> ExperimentConfig field
FLAG_FIELDS = {
    "nodes": "nodes", "tm": "tm", "tw": "tw", "fd": "fd", "rounds": "rounds",
    "runs": "runs", "seed": "seed", "adversary": "adversary",
    "encrypt_tickets": "encrypt_tickets", "pipeline": "pipeline", "check": "check",
    "out": "out", "format": "format", "dump_trace": "dump_trace",
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="tlcqsc",
        description="Run QSC consensus over threshold logical clocks in a simulated network.")
    ap.add_argument("--config", help="JSON file of ExperimentConfig keys; flags override it")
    ap.add_argument("--nodes", type=int, help="number of nodes n (default 3)")
    ap.add_argument("--tm", type=int, help="message threshold t_m (default f+1)")
    ap.add_argument("--tw", type=int, help="witness threshold t_w (default f+1; 0 disables witnessing)")
    ap.add_argument("--fd", type=int, help="maximum delay-set size f_d (default 0)")
    ap.add_argument("--rounds", type=int, help="consensus rounds per run (default 10)")
    ap.add_argument("--runs", type=int, help="independent runs with seeds seed, seed+1, ... (default 1)")
    ap.add_argument("--seed", type=int, help="base seed (default 0)")
    ap.add_argument("--adversary", choices=ADVERSARIES, help="network scheduler (default oblivious)")
    ap.add_argument("--encrypt-tickets", action=argparse.BooleanOptionalAction,
                    help="seal lottery tickets until round end (default on)")
    ap.add_argument("--pipeline", action=argparse.BooleanOptionalAction,
                    help="start a new round every step instead of every three")
    ap.add_argument("--check", action=argparse.BooleanOptionalAction,
                    help="check every trace for property violations")
    ap.add_argument("--out", help="output path (default stdout)")
    ap.add_argument("--format", choices=("csv", "json"), help="output format (default csv)")
    ap.add_argument("--dump-trace", metavar="PATH",
                    help="write each run's NDJSON trace (PATH gets a .runK suffix when runs > 1)")
    return ap


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    values: dict = {}
    if args.config:
        try:
            with open(args.config) as fh:
                values = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
    for dest, key in FLAG_FIELDS.items():
        v = getattr(args, dest)
        if v is not None:
            values[key] = v
    try:
        return ExperimentConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        summary = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ViolationFound as exc:
        for v in exc.violations:
            print(v, file=sys.stderr)
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    if cfg.out is None:
        sys.stdout.write(render(summary, cfg.format))
    else:
        rates = ", ".join(f"{r:.3f}" for r in summary.commit_rate)
        print(f"{summary.runs} run(s), {cfg.rounds} round(s); commit rate per node: [{rates}]; "
              f"truncated runs: {summary.truncated}; wrote {cfg.out}")
    if summary.truncated:
        print(f"warning: {summary.truncated} run(s) hit the event budget", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
