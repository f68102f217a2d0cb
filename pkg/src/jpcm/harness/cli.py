"""Command line entry point: ``jpcm run | rmse | compare``.

Exit codes: 0 success, 1 solver failure during the run, 2 bad input or I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .metrics import compute_rmse, emit_csv, read_csv
from .runner import run_scenario
from .scenario import canned_config_dir, load_scenario

EXIT_OK, EXIT_SOLVER, EXIT_INPUT = 0, 1, 2


def _fmt(v) -> str:
    return " ".join(f"{x:8.4f}" for x in v)


def _cmd_run(args) -> int:
    scenario = load_scenario(args.config)
    if args.seed is not None:
        scenario = scenario.with_(seed=args.seed)
    if args.duration is not None:
        scenario = scenario.with_(duration=args.duration)
    t0 = time.perf_counter()
    log = run_scenario(scenario)
    wall = time.perf_counter() - t0
    out = Path(args.out or f"{scenario.name}.csv")
    emit_csv(log, out, timing=args.timing)
    print(f"{scenario.name}: {len(log)} steps in {wall:.1f} s -> {out}")
    if len(log) and log.records[-1].t >= scenario.rmse_skip:
        r = compute_rmse(log)
        print(f"  position RMSE (m)   {_fmt(r.position)}")
        print(f"  rotation RMSE (rad) {_fmt(r.rotation)}")
    if args.plot_dir:
        from .plots import render
        for p in render({scenario.name: read_csv(out)}, args.plot_dir, out.stem):
            print(f"  figure {p}")
    if log.truncated:
        print(f"  run truncated: {log.failure}", file=sys.stderr)
        return EXIT_SOLVER
    if log.solver_failures:
        print(f"  {log.solver_failures} step(s) with solver failure (input held)", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _cmd_rmse(args) -> int:
    lg = read_csv(args.log)
    r = lg.rmse(args.skip)
    print(f"position RMSE (m)   {_fmt(r.position)}")
    print(f"rotation RMSE (rad) {_fmt(r.rotation)}")
    if lg.failure:
        print(f"note: log truncated ({lg.failure})", file=sys.stderr)
    return EXIT_OK


def _cmd_compare(args) -> int:
    logs = {Path(p).stem: read_csv(p) for p in args.logs}
    width = max(12, max(len(n) for n in logs))
    print(f"{'':{width}s} {'position (m)':^28s}   {'rotation (rad)':^28s}")
    print(f"{'':{width}s} {'x':>8s} {'y':>8s} {'z':>8s}     {'x':>8s} {'y':>8s} {'z':>8s}")
    for name, lg in logs.items():
        r = lg.rmse(args.skip)
        flag = "  (truncated)" if lg.failure else ""
        print(f"{name:{width}s} {_fmt(r.position)}   {_fmt(r.rotation)}{flag}")
    if args.plot_dir:
        from .plots import render
        for p in render(logs, args.plot_dir, "compare"):
            print(f"figure {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jpcm", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log solver diagnostics")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one scenario and write its CSV log")
    run.add_argument("--config", required=True,
                     help=f"scenario file; shipped configs live in {canned_config_dir()}")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--duration", type=float, help="override the run length (s)")
    run.add_argument("--out", help="CSV path (default <name>.csv)")
    run.add_argument("--timing", action="store_true",
                     help="record wall-clock solve times (makes the CSV non-reproducible)")
    run.add_argument("--plot-dir", help="also render figures into this directory")
    run.set_defaults(func=_cmd_run)

    rmse = sub.add_parser("rmse", help="per-axis RMSE of a CSV log")
    rmse.add_argument("--log", required=True)
    rmse.add_argument("--skip", type=float, default=1.0, help="transient to exclude (s)")
    rmse.set_defaults(func=_cmd_rmse)

    cmp_ = sub.add_parser("compare", help="RMSE table over several CSV logs")
    cmp_.add_argument("--logs", nargs="+", required=True)
    cmp_.add_argument("--skip", type=float, default=1.0, help="transient to exclude (s)")
    cmp_.add_argument("--plot-dir", help="also render overlay figures into this directory")
    cmp_.set_defaults(func=_cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
