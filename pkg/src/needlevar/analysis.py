"""Lie brackets, span certificates and descent maps.

The second-order insertion Hessian couples control directions through their
Lie brackets, so a state where the first-order gradient vanishes can still
admit descent when the brackets reach the missing directions. The tools here
check that numerically.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .models import SystemModel
from .needle import FIRST_ORDER, SECOND_ORDER, SynthesisConfig, mih, plan_horizon, second_order_action
from .objective import Objective

VectorField = Callable[[np.ndarray], np.ndarray]


def numeric_jacobian(field: VectorField, x, step: float = 1e-6) -> np.ndarray:
    """Central differences, step scaled by ``max(1, |x_j|)``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(field(x), dtype=float)
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        hj = step * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = hj
        J[:, j] = (np.asarray(field(x + e)) - np.asarray(field(x - e))) / (2 * hj)
    return J


def lie_bracket(f: VectorField, g: VectorField, x, jac_f=None, jac_g=None) -> np.ndarray:
    """``[f, g](x) = Dg(x) f(x) - Df(x) g(x)``.

    ``jac_f`` / ``jac_g`` may be callables or precomputed matrices; missing
    ones are taken by central differences.
    """
    x = np.asarray(x, dtype=float)
    Jf = _jac(jac_f, f, x)
    Jg = _jac(jac_g, g, x)
    return Jg @ np.asarray(f(x), dtype=float) - Jf @ np.asarray(g(x), dtype=float)


def _jac(given, field, x):
    if given is None:
        return numeric_jacobian(field, x)
    if callable(given):
        return np.asarray(given(x), dtype=float)
    return np.asarray(given, dtype=float)


def flow(field: VectorField, x, duration: float, steps: int = 64) -> np.ndarray:
    """RK4 flow of an autonomous field (negative durations run it backward)."""
    x = np.asarray(x, dtype=float).copy()
    h = duration / steps
    for _ in range(steps):
        k1 = field(x)
        k2 = field(x + 0.5 * h * k1)
        k3 = field(x + 0.5 * h * k2)
        k4 = field(x + h * k3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def flow_commutator(f: VectorField, g: VectorField, x, eps: float, steps: int = 64) -> np.ndarray:
    """``(phi^-g_eps o phi^-f_eps o phi^g_eps o phi^f_eps (x) - x) / eps^2``.

    Follows ``f``, then ``g``, then ``-f``, then ``-g`` for time ``eps`` each;
    the displacement over ``eps**2`` tends to ``[f, g](x)``.
    """
    x = np.asarray(x, dtype=float)
    y = flow(f, x, eps, steps)
    y = flow(g, y, eps, steps)
    y = flow(f, y, -eps, steps)
    y = flow(g, y, -eps, steps)
    return (y - x) / (eps * eps)


# -- span certificates ------------------------------------------------------------


@dataclass(frozen=True)
class BracketSet:
    """Control columns, their pairwise brackets and drift brackets at one state."""

    x: np.ndarray
    columns: np.ndarray  # (N, M)
    pair_brackets: dict  # (i, j) -> [h_i, h_j], i < j
    drift_brackets: np.ndarray  # (N, M), column i is [g, h_i]

    def bracket(self, i: int, j: int) -> np.ndarray:
        if i == j:
            return np.zeros(self.columns.shape[0])
        if i < j:
            return self.pair_brackets[(i, j)]
        return -self.pair_brackets[(j, i)]

    def matrix(self) -> np.ndarray:
        """Every vector side by side: columns, pair brackets, drift brackets."""
        pairs = [self.pair_brackets[k] for k in sorted(self.pair_brackets)]
        parts = [self.columns]
        if pairs:
            parts.append(np.stack(pairs, axis=1))
        parts.append(self.drift_brackets)
        return np.concatenate(parts, axis=1)


def bracket_set(model: SystemModel, x) -> BracketSet:
    """Analytic first-order brackets from the model's Jacobians."""
    x = np.asarray(x, dtype=float)
    h = model.h(x)
    dh = model.dh(x)  # (M, N, N)
    g = model.g(x)
    dg = model.dg(x)
    M = model.control_dim
    pairs = {}
    for i, j in itertools.combinations(range(M), 2):
        pairs[(i, j)] = dh[j] @ h[:, i] - dh[i] @ h[:, j]
    drift = np.stack([dh[i] @ g - dg @ h[:, i] for i in range(M)], axis=1)
    return BracketSet(x, h, pairs, drift)


def tangent_basis(model: SystemModel, x) -> np.ndarray:
    """Orthonormal basis of the tangent space at ``x``; quaternion blocks lose the norm direction."""
    x = np.asarray(x, dtype=float)
    N = model.state_dim
    if model.quat_start is None:
        return np.eye(N)
    s = model.quat_start
    q = x[s : s + 4] / np.linalg.norm(x[s : s + 4])
    # complement of q inside the quaternion block
    _, _, vt = np.linalg.svd(q[None, :])
    comp = vt[1:].T  # (4, 3)
    cols = []
    for k in range(N):
        if s <= k < s + 4:
            continue
        e = np.zeros(N)
        e[k] = 1.0
        cols.append(e)
    for c in comp.T:
        e = np.zeros(N)
        e[s : s + 4] = c
        cols.append(e)
    return np.stack(cols, axis=1)


def bracket_span_rank(model: SystemModel, x, rel_tol: float = 1e-8):
    """Numerical rank of the columns plus first-order brackets on the tangent space."""
    bs = bracket_set(model, x)
    A = tangent_basis(model, x).T @ bs.matrix()
    sv = np.linalg.svd(A, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0, bs
    return int(np.sum(sv > rel_tol * sv[0])), bs


# -- descent maps ------------------------------------------------------------------


@dataclass(frozen=True)
class DescentMap:
    """Predicted cost change on a grid of states.

    ``axes`` names the state rows that vary; ``coords`` holds one row of grid
    coordinates per cell. ``predicted_dJ`` is the quadratic model at the
    second-order action and ``mig_first_order`` the insertion gradient at the
    first-order action. Cells inside obstacles are dropped.
    """

    axes: tuple
    coords: np.ndarray
    predicted_dJ: np.ndarray
    mig_first_order: np.ndarray
    lam: float

    def __len__(self) -> int:
        return len(self.coords)

    def to_csv(self, path) -> None:
        """Write to a path or an open text stream."""
        if hasattr(path, "write"):
            self._write(path)
            return
        with open(path, "w", newline="") as fh:
            self._write(fh)

    def _write(self, fh) -> None:
        w = csv.writer(fh)
        w.writerow([f"x{a}" for a in self.axes] + ["predicted_dJ_second_order", "mig_first_order"])
        for c, dj, g in zip(self.coords, self.predicted_dJ, self.mig_first_order):
            w.writerow([f"{v:.17e}" for v in c] + [f"{dj:.17e}", f"{g:.17e}"])


def grid_states(base, axes: Sequence[int], ranges: Sequence[Sequence[float]], step: float) -> tuple:
    """Cartesian grid over ``axes`` (inclusive of both ends); other rows copy ``base``."""
    if len(axes) != len(ranges):
        raise ValueError("one range per axis")
    if not step > 0:
        raise ValueError("step must be positive")
    base = np.asarray(base, dtype=float)
    lines = []
    for lo, hi in ranges:
        n = int(np.floor((hi - lo) / step + 1e-9)) + 1
        lines.append(lo + step * np.arange(n))
    mesh = np.stack(np.meshgrid(*lines, indexing="ij"), -1).reshape(-1, len(axes))
    states = np.repeat(base[None, :], len(mesh), axis=0)
    states[:, list(axes)] = mesh
    return mesh, states


_SHARED: tuple = ()


def _share(args) -> None:
    global _SHARED
    _SHARED = args


def _cell(x):
    model, obj_second, obj_first, t, cfg_second, cfg_first = _SHARED
    p2 = plan_horizon(model, obj_second, x, t, cfg_second, SECOND_ORDER, None, search=False)
    p1 = plan_horizon(model, obj_first, x, t, cfg_first, FIRST_ORDER, None, search=False)
    return float(np.min(p2.model_curve)), float(np.min(p1.mig_curve))


def descent_map(
    model: SystemModel,
    obj_second: Objective,
    obj_first: Objective,
    states: np.ndarray,
    axes: Sequence[int],
    cfg_second: SynthesisConfig,
    cfg_first: SynthesisConfig,
    t: float = 0.0,
    workers: int = 1,
) -> DescentMap:
    """Synthesize without applying at every state and record the predicted change.

    The two objectives differ only in their control metric. Cells are
    independent; with ``workers > 1`` they are spread over a process pool and
    merged back in grid order.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    keep = obj_second.clearance(states, t) > 0 if obj_second.obstacles else np.ones(len(states), bool)
    states = states[keep]
    shared = (model, obj_second, obj_first, t, cfg_second, cfg_first)
    if workers == 1 or len(states) < 2:
        _share(shared)
        out = [_cell(x) for x in states]
    else:
        # models hold closures, so workers inherit them by fork instead of pickling
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_share, initargs=(shared,)) as pool:
            out = list(pool.map(_cell, states, chunksize=max(1, len(states) // (4 * workers))))
    vals = np.asarray(out, dtype=float).reshape(-1, 2)
    return DescentMap(tuple(axes), states[:, list(axes)], vals[:, 0], vals[:, 1], cfg_second.lambda_nominal)


# -- per-state diagnostics -----------------------------------------------------------


@dataclass(frozen=True)
class PropositionReport:
    max_abs_mig: float
    rho_h: np.ndarray  # rho^T h_i per column
    rho_pair_brackets: dict  # (i, j) -> rho^T [h_i, h_j]
    rho_drift_brackets: np.ndarray  # rho^T [g, h_i]
    min_mih: float
    min_mih_control: np.ndarray


def proposition_diagnostics(
    model: SystemModel, obj: Objective, x, cfg: SynthesisConfig, t: float = 0.0, grid_per_axis: int = 5
) -> PropositionReport:
    """First- and second-order descent witnesses at the start of the horizon.

    ``max_abs_mig`` is the largest ``|MIG|`` over the saturation box (box
    radii times ``|rho^T h|`` about the default control ``v = 0``). The MIH
    minimum is searched over a grid of the box plus the second-order action.
    """
    x = np.asarray(x, dtype=float)
    plan = plan_horizon(model, obj, x, t, cfg, SECOND_ORDER, None, search=False)
    rho = plan.adjoints.rho.values[0]
    omega = plan.adjoints.omega.values[0]
    bs = bracket_set(model, x)
    rho_h = rho @ bs.columns
    radius = np.maximum(np.abs(model.lower), np.abs(model.upper))
    max_mig = float(np.sum(np.abs(rho_h) * radius))
    pair = {k: float(rho @ b) for k, b in bs.pair_brackets.items()}
    drift = rho @ bs.drift_brackets
    v = np.zeros(model.control_dim)
    axes = [np.linspace(lo, hi, grid_per_axis) for lo, hi in zip(model.lower, model.upper)]
    cand = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, model.control_dim)
    u_star = model.saturate(second_order_action(model, obj, rho, omega, x, v, t, cfg, box=True))
    cand = np.vstack([cand, u_star[None, :]])
    vals = mih(model, obj, rho, omega, np.broadcast_to(x, (len(cand), x.size)), cand, v, t)
    k = int(np.argmin(vals))
    return PropositionReport(max_mig, rho_h, pair, drift, float(vals[k]), cand[k])


def with_lambda(cfg: SynthesisConfig, lam: float) -> SynthesisConfig:
    return dataclasses.replace(cfg, lambda_nominal=lam)
