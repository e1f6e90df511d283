"""Command-line entry point: ``simulate <case-file> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .case import load_case
from .driver import SolverFailure, run_case, summary_text
from .errors import ConfigurationError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="simulate", description="Run a fractured-reservoir case.")
    ap.add_argument("case", help="case file (TOML) or built-in case name such as case1")
    ap.add_argument("--solver", choices=["standard", "localized", "adaptive_dd"])
    ap.add_argument("--m", type=int, help="neighbourhood layers added per flagged boundary cell")
    ap.add_argument("--eps-p", type=float, help="pressure cutoff in psi")
    ap.add_argument("--out", default="out", help="output directory (default: out)")
    ap.add_argument("--trace-flags", action="store_true", help="write per-iteration flag maps")
    ap.add_argument("--report-every", type=float, help="field output interval in days")
    ap.add_argument("-v", "--verbose", action="store_true", help="log every timestep")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    over = {}
    if args.solver is not None:
        over["solver.kind"] = args.solver
    if args.m is not None:
        over["solver.m"] = args.m
    if args.eps_p is not None:
        over["solver.eps_p_psi"] = args.eps_p
    if args.report_every is not None:
        over["output.report_every_days"] = args.report_every
    try:
        cfg = load_case(args.case)
        if over:
            cfg = cfg.replace(**over)
    except (ConfigurationError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_case(cfg, out_dir=args.out, trace_flags=args.trace_flags or None,
                          progress=args.verbose)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    sys.stdout.write(summary_text(cfg, result.metrics))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
