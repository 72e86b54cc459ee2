"""CSV and key-value emission of trial results."""

from __future__ import annotations

import csv
import math
import os
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .closed_loop import MonteCarloSummary, TrialResult

TRIAL_COLUMNS = ["index", "mode", "converged", "time_to_converge", "final_error", "min_clearance", "reason"]


def fmt(value) -> str:
    """Full-precision scientific notation for floats; ints and strings pass through."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.17e}"
    return str(value)


def _trial_header(state_dim: int) -> list:
    return TRIAL_COLUMNS + [f"x0_{i}" for i in range(state_dim)]


def write_trials(path, trials: Sequence[TrialResult], state_dim: Optional[int] = None) -> None:
    """One row per trial, sorted by (mode, index)."""
    trials = sorted(trials, key=lambda r: (r.mode, r.index))
    if state_dim is None:
        state_dim = len(trials[0].x0) if trials else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_trial_header(state_dim))
        for r in trials:
            row = [r.index, r.mode, bool(r.converged), r.time_to_converge, r.final_error, r.min_clearance, r.reason]
            w.writerow([fmt(v) for v in row] + [fmt(float(v)) for v in r.x0])


def write_trajectory(path, trial: TrialResult, stride: int = 1) -> None:
    """Columns: t, state, control, J, error distance, obstacle clearance.

    The control on a row is the one applied from that time on; the last row
    has none. J is the horizon cost from the feedback instant that row belongs to.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, N = trial.states.shape
    M = trial.controls.shape[1]
    idx = np.arange(0, n, stride)
    if idx[-1] != n - 1:
        idx = np.append(idx, n - 1)
    header = ["t"] + [f"x{i}" for i in range(N)] + [f"u{k}" for k in range(M)] + ["J", "error_distance", "clearance"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in idx:
            row = [trial.times[i], *trial.states[i], *trial.controls[i], trial.costs[i], trial.errors[i], trial.clearances[i]]
            w.writerow([fmt(float(v)) for v in row])


def write_summary(path, summaries: Iterable[MonteCarloSummary], extra: Optional[dict] = None) -> None:
    """``key = value`` lines; keys are prefixed with the mode when several are given."""
    summaries = list(summaries)
    with open(path, "w") as fh:
        for k, v in (extra or {}).items():
            fh.write(f"{k} = {fmt(v)}\n")
        for s in summaries:
            prefix = f"{s.mode}." if len(summaries) > 1 else ""
            for k, v in s.as_dict().items():
                fh.write(f"{prefix}{k} = {fmt(v)}\n")


def emit_results(results, out_dir, stride: int = 1, state_dim: Optional[int] = None, extra: Optional[dict] = None) -> Path:
    """Write ``trials.csv``, ``trajectories/*.csv`` and ``summary.txt`` under ``out_dir``.

    ``results`` is a MonteCarloSummary, a list of them, or a list of
    TrialResult. Returns the output directory.
    """
    if isinstance(results, MonteCarloSummary):
        summaries, trials = [results], list(results.trials)
    else:
        results = list(results)
        summaries = [r for r in results if isinstance(r, MonteCarloSummary)]
        trials = [t for s in summaries for t in s.trials] + [r for r in results if isinstance(r, TrialResult)]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    write_trials(out / "trials.csv", trials, state_dim)
    traj_dir = out / "trajectories"
    traj_dir.mkdir(exist_ok=True)
    for r in trials:
        write_trajectory(traj_dir / f"{r.mode}_{r.index:04d}.csv", r, stride)
    write_summary(out / "summary.txt", summaries, extra)
    return out
