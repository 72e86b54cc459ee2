"""Receding-horizon simulation and the Monte Carlo runner."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..models import SystemModel
from ..needle import NeedleAction, SynthesisConfig, insertion_window, plan_horizon, rollout
from ..objective import Objective
from .scenario import Scenario, SuccessSpec

log = logging.getLogger(__name__)


@dataclass
class TrialResult:
    index: int
    mode: str
    x0: np.ndarray
    converged: bool
    time_to_converge: float
    min_clearance: float
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    costs: np.ndarray
    errors: np.ndarray
    clearances: np.ndarray
    actions: list = field(default_factory=list)
    reason: str = ""

    @property
    def final_error(self) -> float:
        return float(self.errors[-1]) if len(self.errors) else math.nan


def _wrap(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def success_mask(model: SystemModel, obj: Objective, spec: SuccessSpec, times, states) -> np.ndarray:
    """Per-sample convergence test against the (possibly moving) target."""
    if spec.position_tol is None:
        return np.zeros(len(times), dtype=bool)
    target = obj.target_at(times)
    rows = list(model.position_rows)
    ok = np.linalg.norm(states[:, rows] - target[:, rows], axis=1) < spec.position_tol
    if spec.angle_tol is not None and model.angle_rows:
        ang = list(model.angle_rows)
        ok &= np.all(np.abs(_wrap(states[:, ang] - target[:, ang])) < spec.angle_tol, axis=1)
    if spec.speed_tol is not None and model.state_dim >= 10:
        ok &= np.linalg.norm(states[:, 7:10], axis=1) < spec.speed_tol
    return ok & (np.asarray(times) <= spec.deadline + 1e-9)


def simulate_feedback(
    model: SystemModel,
    obj: Objective,
    cfg: SynthesisConfig,
    x0,
    mode: str,
    rate_hz: float,
    duration: float,
    success: Optional[SuccessSpec] = None,
    index: int = 0,
) -> TrialResult:
    """Closed loop: re-plan at every feedback instant and apply the part of the
    action that falls in the current period, default control otherwise."""
    period = 1.0 / rate_hz
    n_periods = int(math.ceil(duration / period - 1e-9))
    rows = list(model.position_rows)
    v = np.zeros(model.control_dim)
    x = np.asarray(x0, dtype=float).copy()
    ts, xs, us, js = [0.0], [x.copy()], [], []
    actions: list = []
    converged, t_conv, reason = False, math.nan, ""
    if success is not None and success_mask(model, obj, success, np.array([0.0]), x[None])[0]:
        converged, t_conv = True, 0.0
    k = 0
    while not converged and k < n_periods:
        t = k * period
        t_next = min((k + 1) * period, duration)
        try:
            plan = plan_horizon(model, obj, x, t, cfg, mode, v)
        except (FloatingPointError, ArithmeticError) as exc:
            reason = f"diverged: {exc}"
            break
        act = plan.action
        actions.append((t, act))
        u = v
        win = (0.0, 0.0)
        if act.accepted:
            a, b = insertion_window(act.tau, act.duration, cfg, t, t + cfg.horizon)
            a, b = max(a, t), min(b, t_next)
            if b > a:
                u, win = act.u, (a, b)
        seg = rollout(model, obj, x, t, t_next - t, cfg.dt, v, u, win).traj
        if not np.all(np.isfinite(seg.values)):
            reason = "diverged: non-finite state"
            break
        seg_t = seg.times[1:]
        seg_x = seg.values[1:]
        on = (seg.times[:-1] >= win[0] - 1e-12) & (seg.times[:-1] < win[1] - 1e-12)
        seg_u = np.where(on[:, None], u, v)
        if success is not None:
            hit = success_mask(model, obj, success, seg_t, seg_x)
            if np.any(hit):
                j = int(np.argmax(hit))
                seg_t, seg_x, seg_u = seg_t[: j + 1], seg_x[: j + 1], seg_u[: j + 1]
                converged, t_conv = True, float(seg_t[-1])
        ts.extend(seg_t.tolist())
        xs.extend(seg_x)
        us.extend(seg_u)
        js.extend([act.J0] * len(seg_t))
        x = seg.values[-1] if not converged else seg_x[-1]
        k += 1

    times = np.asarray(ts)
    states = np.asarray(xs)
    controls = np.vstack([np.asarray(us).reshape(-1, model.control_dim), np.full((1, model.control_dim), np.nan)])
    costs = np.asarray(js + [math.nan]) if js else np.array([math.nan])
    tgt = obj.target_at(times)
    errors = np.linalg.norm(states[:, rows] - tgt[:, rows], axis=1)
    clear = obj.clearance(states, times)
    return TrialResult(
        index=index,
        mode=mode,
        x0=np.asarray(x0, dtype=float),
        converged=converged,
        time_to_converge=t_conv,
        min_clearance=float(np.min(clear)),
        times=times,
        states=states,
        controls=controls,
        costs=costs,
        errors=errors,
        clearances=clear,
        actions=actions,
        reason=reason,
    )


def run_closed_loop(scenario: Scenario, x0=None, mode: Optional[str] = None, index: int = 0) -> TrialResult:
    mode = mode or scenario.mode
    model = scenario.build_model()
    obj = scenario.build_objective(mode, model)
    cfg = scenario.synthesis_config(mode)
    if x0 is None:
        rng = np.random.default_rng(scenario.seed)
        x0 = scenario.sample_initial(rng, model, obj)
    return simulate_feedback(model, obj, cfg, x0, mode, scenario.settings(mode)["rate_hz"],
                             scenario.sim_duration, scenario.success, index)


@dataclass
class MonteCarloSummary:
    scenario: str
    mode: str
    seed: int
    trials: list

    @property
    def n(self) -> int:
        return len(self.trials)

    @property
    def successes(self) -> int:
        return sum(t.converged for t in self.trials)

    @property
    def success_rate(self) -> float:
        return self.successes / self.n if self.n else math.nan

    def times(self) -> np.ndarray:
        return np.array([t.time_to_converge for t in self.trials if t.converged])

    def quantiles(self, qs=(0.25, 0.5, 0.75)) -> dict:
        ct = self.times()
        return {q: (float(np.quantile(ct, q)) if len(ct) else math.nan) for q in qs}

    @property
    def mean_time(self) -> float:
        ct = self.times()
        return float(ct.mean()) if len(ct) else math.nan

    def as_dict(self) -> dict:
        out = {
            "scenario": self.scenario,
            "mode": self.mode,
            "seed": self.seed,
            "trials": self.n,
            "successes": self.successes,
            "success_rate": self.success_rate,
            "mean_time_to_converge": self.mean_time,
        }
        for q, val in self.quantiles().items():
            out[f"time_q{int(round(q * 100)):02d}"] = val
        return out


def initial_states(scenario: Scenario, n_trials: int, seed: int) -> list:
    """Start states for a run; the same seed gives the same list in both modes."""
    model = scenario.build_model()
    obj = scenario.build_objective("second", model)
    rng = np.random.default_rng(seed)
    return [scenario.sample_initial(rng, model, obj) for _ in range(n_trials)]


def _trial(args) -> TrialResult:
    scenario, x0, mode, index = args
    res = run_closed_loop(scenario, x0, mode, index=index)
    log.info("%s %s trial %d: converged=%s t=%.3f", scenario.name, mode, index, res.converged, res.time_to_converge)
    return res


def run_monte_carlo(
    scenario: Scenario,
    n_trials: Optional[int] = None,
    seed: Optional[int] = None,
    mode: Optional[str] = None,
    workers: int = 1,
) -> MonteCarloSummary:
    """Independent trials from seeded start states; ``workers > 1`` uses a process pool.

    Results are sorted by trial index, so the summary does not depend on
    the number of workers.
    """
    n_trials = scenario.trials if n_trials is None else n_trials
    seed = scenario.seed if seed is None else seed
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    mode = mode or scenario.mode
    jobs = [(scenario, x0, mode, i) for i, x0 in enumerate(initial_states(scenario, n_trials, seed))]
    if workers == 1:
        results = [_trial(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_trial, jobs))
    results.sort(key=lambda r: r.index)
    return MonteCarloSummary(scenario.name, mode, seed, results)
