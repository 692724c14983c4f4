"""Command line entry point: ``beamsquint run|squint|diag``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from .channel import ConfigurationError, NumericalError
from .extraction import write_trace_csv
from .harness import diagnose, emit_csv, emit_json, load_config, run_scenario, squint_summary

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beamsquint", description="Wideband mmWave channel estimation experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a Monte Carlo scenario")
    run.add_argument("--config", required=True, help="scenario file (section.key = value lines)")
    run.add_argument("--out", required=True, help="output path")
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--threads", type=int, default=1, help="worker processes for trials")

    sq = sub.add_parser("squint", help="squint span / bandwidth conversions")
    sq.add_argument("--M", type=int, required=True, help="number of antennas")
    sq.add_argument("--W", type=float, required=True, help="bandwidth in Hz")
    sq.add_argument("--fc", type=float, required=True, help="carrier in Hz")
    sq.add_argument("--d-over-lambda", type=float, default=0.5)
    sq.add_argument("--num-subcarriers", type=int, default=256)
    sq.add_argument("--sin-theta", type=float, default=1.0)

    dg = sub.add_parser("diag", help="dump an extraction convergence trace")
    dg.add_argument("--config", required=True)
    dg.add_argument("--out", required=True, help="trace CSV path")
    dg.add_argument("--trial", type=int, default=0)
    dg.add_argument("--conventional", action="store_true", help="use the frequency-flat model")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = replace(cfg, seed=args.seed)
            if args.threads < 1:
                raise ConfigurationError("--threads must be at least 1")
            table = run_scenario(cfg, threads=args.threads)
            (emit_csv if args.format == "csv" else emit_json)(table, args.out)
        elif args.command == "squint":
            if args.M < 1 or args.W <= 0 or args.fc <= 0:
                raise ConfigurationError("M, W and fc must be positive")
            print(json.dumps(squint_summary(args.M, args.W, args.fc, args.d_over_lambda,
                                            args.num_subcarriers, args.sin_theta), indent=1))
        elif args.command == "diag":
            cfg = load_config(args.config)
            res = diagnose(cfg, args.trial, squint=not args.conventional)
            write_trace_csv(res.trace, args.out)
            print(f"{res.num_paths} paths, {res.iterations} iterations, converged={res.converged}")
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
