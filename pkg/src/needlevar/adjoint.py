"""First- and second-order costates along a default trajectory.

``rho' = -D_x l^T - D_x f1^T rho`` from ``rho(t_f) = D_x m^T`` and
``Omega' = -D_x f1^T Omega - Omega D_x f1 - D_x^2 l - sum_i rho_i D_x^2 f1^i``
from ``Omega(t_f) = D_x^2 m``. Both are swept backward with RK4 on the grid
of the forward pass; the state at step midpoints comes from its Hermite
interpolant, so no extra dynamics pass is needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .kernels import backend
from .models import SystemModel
from .objective import Objective, running_cost, terminal_cost
from .ode import IntegrationDiverged, MatrixTrajectory, Trajectory, midpoints

DefaultControl = Union[None, np.ndarray, Callable[[float], np.ndarray]]


@dataclass(frozen=True)
class AdjointPair:
    rho: Trajectory
    omega: Optional[MatrixTrajectory] = None


def default_controls(v: DefaultControl, times: np.ndarray, control_dim: int) -> np.ndarray:
    """Evaluate the default control at every time, shape ``(K, M)``."""
    times = np.asarray(times, dtype=float)
    if v is None:
        return np.zeros((len(times), control_dim))
    if callable(v):
        return np.stack([np.asarray(v(float(t)), dtype=float).reshape(control_dim) for t in times])
    v = np.asarray(v, dtype=float).reshape(control_dim)
    return np.broadcast_to(v, (len(times), control_dim)).copy()


def _interleave(nodes: np.ndarray, mids: np.ndarray) -> np.ndarray:
    out = np.empty((len(nodes) + len(mids),) + nodes.shape[1:])
    out[0::2] = nodes
    out[1::2] = mids
    return out


def _coefficient_points(traj: Trajectory, model: SystemModel, v: DefaultControl):
    times = traj.times
    tmid = 0.5 * (times[:-1] + times[1:])
    t_all = _interleave(times, tmid)
    x_all = _interleave(traj.values, midpoints(traj))
    v_all = default_controls(v, t_all, model.control_dim)
    return t_all, x_all, v_all


def _check(arr: np.ndarray, times: np.ndarray, what: str):
    bad = ~np.all(np.isfinite(arr.reshape(len(arr), -1)), axis=1)
    if np.any(bad):
        raise IntegrationDiverged(float(times[np.nonzero(bad)[0].max()]), what)


def solve_rho(
    model: SystemModel,
    obj: Objective,
    default_traj: Trajectory,
    v: DefaultControl = None,
    _points=None,
) -> Trajectory:
    """First-order costate on the grid of ``default_traj``."""
    traj = default_traj
    if len(traj) < 2:
        raise ValueError("the default trajectory needs at least two samples")
    t_all, x_all, v_all = _points if _points is not None else _coefficient_points(traj, model, v)
    A = np.ascontiguousarray(model.jac(x_all, v_all))
    _, b = running_cost(obj, x_all, t_all, order=1)
    b = np.ascontiguousarray(b)
    rho_end = np.ascontiguousarray(terminal_cost(obj, traj.final, traj.t_end)[1])
    steps = np.ascontiguousarray(np.diff(traj.times))
    rho = backend.sweep_rho(A, b, rho_end, steps)
    _check(rho, traj.times, "costate")
    derivs = -b[0::2] - np.einsum("kji,kj->ki", A[0::2], rho)
    return Trajectory(traj.times, rho, derivs)


def solve_omega(
    model: SystemModel,
    obj: Objective,
    default_traj: Trajectory,
    rho: Trajectory,
    v: DefaultControl = None,
    _points=None,
) -> MatrixTrajectory:
    """Second-order costate; needs ``rho`` on the same grid."""
    traj = default_traj
    if len(rho) != len(traj) or not np.array_equal(rho.times, traj.times):
        raise ValueError("rho must live on the grid of the default trajectory")
    t_all, x_all, v_all = _points if _points is not None else _coefficient_points(traj, model, v)
    rho_all = _interleave(rho.values, midpoints(rho))
    A = np.ascontiguousarray(model.jac(x_all, v_all))
    _, _, Lxx = running_cost(obj, x_all, t_all, order=2)
    C = np.ascontiguousarray(Lxx + model.hess_contract(x_all, v_all, rho_all))
    om_end = np.ascontiguousarray(terminal_cost(obj, traj.final, traj.t_end)[2], dtype=float)
    steps = np.ascontiguousarray(np.diff(traj.times))
    omega = backend.sweep_omega(A, C, om_end, steps)
    _check(omega, traj.times, "second-order costate")
    An = A[0::2]
    AtO = np.einsum("kji,kjl->kil", An, omega)
    derivs = -AtO - np.swapaxes(AtO, 1, 2) - C[0::2]
    return MatrixTrajectory(traj.times, omega, derivs)


def solve_adjoints(
    model: SystemModel,
    obj: Objective,
    default_traj: Trajectory,
    v: DefaultControl = None,
    second_order: bool = True,
) -> AdjointPair:
    pts = _coefficient_points(default_traj, model, v)
    rho = solve_rho(model, obj, default_traj, v, _points=pts)
    omega = solve_omega(model, obj, default_traj, rho, v, _points=pts) if second_order else None
    return AdjointPair(rho, omega)
