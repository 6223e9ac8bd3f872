"""Command-line runner: ``gridmhe run <config>`` and ``gridmhe report <dir>``.

Set ``GRIDMHE_LOG`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ESTIMATORS, load_run
from .errors import ConfigError, ConvergenceError, UnobservableError
from .pipeline import EstimationFailure, run, write_outputs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ESTIMATION = 3
EXIT_UNOBSERVABLE = 4

log = logging.getLogger("gridmhe")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridmhe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="simulate a scenario and run the estimators")
    r.add_argument("config", help="run file, or the name of a bundled one (e.g. testcase1)")
    r.add_argument("--seed", type=int, help="noise seed (overrides the file)")
    r.add_argument("--out", type=Path, help="output directory (default: out/<config name>)")
    r.add_argument("--estimator", choices=ESTIMATORS)
    r.add_argument("--lnr", action=argparse.BooleanOptionalAction, default=None,
                   help="bad-data identification in every window")
    r.add_argument("--horizon", type=int, help="window length L")
    rep = sub.add_parser("report", help="summarize a finished run")
    rep.add_argument("dir", type=Path)
    return p


def cmd_run(args) -> int:
    try:
        cfg = load_run(args.config).with_overrides(seed=args.seed, estimator=args.estimator,
                                                   lnr=args.lnr, horizon=args.horizon)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or Path("out") / cfg.source.stem
    try:
        res = run(cfg)
    except UnobservableError as exc:
        print(f"estimator: {exc}", file=sys.stderr)
        return EXIT_UNOBSERVABLE
    except (EstimationFailure, ConvergenceError) as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    summary = write_outputs(res, out)
    print(format_summary(summary))
    print(f"outputs written to {out}")
    failed = [k for k, s in summary["estimators"].items() if s["nonconverged"]]
    if failed:
        print(f"estimation failed: non-converged windows in {', '.join(failed)}", file=sys.stderr)
        return EXIT_ESTIMATION
    return EXIT_OK


def format_summary(summary: dict) -> str:
    cols = [k for k in ("mhe", "sse") if k in summary["mse"]]
    lines = [f"{summary['config']}  seed={summary['seed']}  L={summary['horizon']}  lnr={summary['lnr']}"]
    lines.append("node" + "".join(f"  {'MSE(' + k.upper() + ')':>12}" for k in cols))
    for i in range(summary["nodes"]):
        lines.append(f"{i + 1:>4}" + "".join(f"  {summary['mse'][k][i]:12.4e}" for k in cols))
    for name, s in summary["estimators"].items():
        lines.append(f"{name.upper()}: {s['windows']} windows, mean GN iterations {s['mean_iterations']:.2f}"
                     f" (max {s['max_iterations']}), non-converged {s['nonconverged']}")
        removed = ", ".join(s["removed_channels"]) or "none"
        lines.append(f"{name.upper()} removed channels: {removed} ({s['removals']} removals)")
    if summary.get("sse_status") == "unobservable":
        lines.append(f"SSE: {summary.get('sse_error', 'unobservable')}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    path = args.dir / "summary.json"
    if not path.is_file():
        print(f"no summary.json in {args.dir}", file=sys.stderr)
        return 1
    with open(path) as fh:
        print(format_summary(json.load(fh)))
    return EXIT_OK


def main(argv=None) -> int:
    level = os.environ.get("GRIDMHE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    return cmd_run(args) if args.command == "run" else cmd_report(args)


if __name__ == "__main__":
    sys.exit(main())
