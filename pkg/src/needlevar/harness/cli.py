"""Command-line entry point.

    needlevar list-presets
    needlevar run diff_drive_mc --mode both --trials 10 --out runs/dd
    needlevar descent-map diff_drive_three_obstacles --grid 0:-200:1000 --grid 1:-400:800 --step 25
    needlevar check-derivatives fish

Exit status is 0 when every requested run finished, whether or not its
trials converged; 1 for runtime failures and 2 for bad arguments.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..analysis import descent_map, grid_states, with_lambda
from ..models import MODEL_BUILDERS, build_model, check_derivatives
from .closed_loop import run_monte_carlo
from .output import emit_results, fmt
from .scenario import PRESETS, ScenarioError, load_scenario, preset

log = logging.getLogger("needlevar")


def _grid_axis(text: str) -> tuple:
    try:
        axis, lo, hi = text.split(":")
        return int(axis), float(lo), float(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected AXIS:LO:HI, got {text!r}") from None


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="needlevar", description="Needle-variation feedback control experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for per-trial progress, -vv for debug")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("list-presets", help="print the shipped scenario names")

    r = sub.add_parser("run", help="Monte Carlo closed-loop trials")
    r.add_argument("scenario", help="preset name or scenario file")
    r.add_argument("--mode", choices=["first", "second", "both"], default=None,
                   help="controller order (default: the scenario's mode)")
    r.add_argument("--trials", type=int, default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--stride", type=int, default=None, help="trajectory row stride (default: scenario record_stride)")
    r.add_argument("--out", type=Path, default=None, help="output directory; summary only on stdout if omitted")

    d = sub.add_parser("descent-map", help="predicted cost change over a state grid")
    d.add_argument("scenario", help="preset name or scenario file")
    d.add_argument("--grid", type=_grid_axis, action="append", required=True, metavar="AXIS:LO:HI",
                   help="one per varied state row")
    d.add_argument("--step", type=float, required=True)
    d.add_argument("--base", type=_floats, default=None, help="values of the fixed rows (default: zeros)")
    d.add_argument("--lam", type=float, default=1e-3, help="nominal action duration")
    d.add_argument("--time", type=float, default=0.0)
    d.add_argument("--workers", type=int, default=1)
    d.add_argument("--out", type=Path, default=None, help="CSV path (default: stdout)")

    c = sub.add_parser("check-derivatives", help="analytic vs finite-difference derivatives")
    c.add_argument("model", choices=sorted(MODEL_BUILDERS))
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tolerance", type=float, default=1e-5)
    return p


def _cmd_list(args) -> int:
    for name in PRESETS:
        sc = preset(name)
        print(f"{name}\t{sc.model_name}\t{sc.trials} trials")
    return 0


def _cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    modes = ["first", "second"] if args.mode == "both" else [args.mode or sc.mode]
    summaries = [run_monte_carlo(sc, args.trials, args.seed, m, workers=args.workers) for m in modes]
    for s in summaries:
        for k, v in s.as_dict().items():
            print(f"{s.mode}.{k} = {fmt(v)}")
    if args.out is not None:
        stride = args.stride if args.stride is not None else sc.record_stride
        emit_results(summaries, args.out, stride=stride)
        print(f"wrote {args.out}")
    return 0


def _cmd_descent(args) -> int:
    sc = load_scenario(args.scenario)
    model = sc.build_model()
    base = np.zeros(model.state_dim) if args.base is None else np.asarray(args.base, dtype=float)
    if base.shape != (model.state_dim,):
        raise ScenarioError(f"--base needs {model.state_dim} values")
    if model.quat_start is not None and args.base is None:
        base[model.quat_start] = 1.0
    axes = [a for a, _, _ in args.grid]
    if any(not 0 <= a < model.state_dim for a in axes):
        raise ScenarioError(f"grid axes must lie in [0, {model.state_dim})")
    _, states = grid_states(base, axes, [(lo, hi) for _, lo, hi in args.grid], args.step)
    dm = descent_map(
        model,
        sc.build_objective("second", model),
        sc.build_objective("first", model),
        states,
        axes,
        with_lambda(sc.synthesis_config("second"), args.lam),
        with_lambda(sc.synthesis_config("first"), args.lam),
        t=args.time,
        workers=args.workers,
    )
    if args.out is None:
        dm.to_csv(sys.stdout)
    else:
        dm.to_csv(args.out)
        neg = int(np.sum(dm.predicted_dJ < 0))
        print(f"{len(dm)} cells, {neg} with predicted decrease; wrote {args.out}")
    return 0


def _cmd_check(args) -> int:
    rep = check_derivatives(build_model(args.model), args.trials, args.seed, args.tolerance)
    for name, err in rep.errors.items():
        print(f"{name} = {fmt(err)}")
    print("passed" if rep.passed else "FAILED: " + ", ".join(rep.failures()))
    return 0 if rep.passed else 1


_COMMANDS = {
    "list-presets": _cmd_list,
    "run": _cmd_run,
    "descent-map": _cmd_descent,
    "check-derivatives": _cmd_check,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ScenarioError, FileNotFoundError, ValueError) as exc:
        print(f"needlevar: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ArithmeticError) as exc:
        print(f"needlevar: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
