"""Quadratic tracking objectives with smooth obstacle penalties.

Running cost ``0.5 (x - x_d)^T Q (x - x_d) + sum_j w_j exp(-k_j (d_j - r_j))``
with ``d_j`` the (smoothed) Euclidean distance between the position rows and
obstacle j. Terminal cost ``0.5 (x - x_d)^T P1 (x - x_d)``. All functions
accept a single state or a ``(K, N)`` stack with matching times.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .ode import Trajectory

# keeps the distance gradient finite at an obstacle center
DIST_SMOOTHING = 1e-6

TARGET_FIXED = 0
TARGET_TRACKING = 1


def target_tracking_trajectory(t, state_dim: int = 13) -> np.ndarray:
    """Moving target of the drifting-fish tracking task (positions only)."""
    t = np.asarray(t, dtype=float)
    rad = 20.0 + 10.0 * np.cos(t / 5.0)
    out = np.zeros(t.shape + (state_dim,))
    out[..., 0] = np.cos(3.0 * t / 10.0) * rad
    out[..., 1] = np.sin(3.0 * t / 10.0) * rad
    out[..., 2] = 10.0 * np.sin(2.0 * t / 5.0)
    return out


@dataclass(frozen=True)
class ObstaclePenalty:
    """Spherical (or circular) obstacle.

    The center may move as ``c0 + velocity t + amplitude * sin(frequency t + phase)``
    (componentwise), which covers the static and the moving-obstacle scenarios.
    """

    center: tuple
    radius: float
    weight: float
    sharpness: float
    velocity: Optional[tuple] = None
    amplitude: Optional[tuple] = None
    frequency: Optional[tuple] = None
    phase: Optional[tuple] = None

    def __post_init__(self):
        if not (self.weight > 0 and self.sharpness > 0 and self.radius >= 0):
            raise ValueError("obstacle needs weight > 0, sharpness > 0, radius >= 0")

    def motion_arrays(self) -> np.ndarray:
        """Rows: center, velocity, amplitude, frequency, phase."""
        c = np.asarray(self.center, dtype=float)
        z = np.zeros_like(c)
        rows = [c]
        for v in (self.velocity, self.amplitude, self.frequency, self.phase):
            rows.append(z if v is None else np.asarray(v, dtype=float))
        return np.stack(rows)

    def center_at(self, t) -> np.ndarray:
        c, vel, amp, freq, ph = self.motion_arrays()
        t = np.asarray(t, dtype=float)[..., None]
        return c + vel * t + amp * np.sin(freq * t + ph)

    @property
    def moving(self) -> bool:
        m = self.motion_arrays()
        return bool(np.any(m[1] != 0) or np.any(m[2] != 0))


TargetLike = Union[Sequence[float], np.ndarray, str, Callable[[float], np.ndarray]]


@dataclass(frozen=True, eq=False)
class Objective:
    Q: np.ndarray
    P1: np.ndarray
    target: TargetLike
    R: np.ndarray
    position_rows: tuple = ()
    obstacles: tuple = ()

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        P1 = np.atleast_2d(np.asarray(self.P1, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        for name, m, strict in (("Q", Q, False), ("P1", P1, False), ("R", R, True)):
            if m.shape[0] != m.shape[1] or not np.allclose(m, m.T):
                raise ValueError(f"{name} must be square and symmetric")
            lo = np.linalg.eigvalsh(m).min() if m.size else 0.0
            if strict and not lo > 0:
                raise ValueError("R must be positive definite")
            if not strict and lo < -1e-12 * max(1.0, np.abs(m).max()):
                raise ValueError(f"{name} must be positive semidefinite")
        if Q.shape != P1.shape:
            raise ValueError("Q and P1 must have the same size")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "P1", P1)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if self.obstacles and not self.position_rows:
            raise ValueError("obstacles need position rows")
        tgt = self.target
        if isinstance(tgt, str):
            if tgt not in ("tracking_v_c",):
                raise ValueError(f"unknown named target {tgt!r}")
        elif not callable(tgt):
            tgt = np.asarray(tgt, dtype=float)
            if tgt.shape != (self.state_dim,):
                raise ValueError("fixed target must match the state dimension")
            object.__setattr__(self, "target", tgt)

    @property
    def state_dim(self) -> int:
        return self.Q.shape[0]

    @property
    def target_kind(self) -> Optional[int]:
        if isinstance(self.target, str):
            return TARGET_TRACKING
        if isinstance(self.target, np.ndarray):
            return TARGET_FIXED
        return None

    def target_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if isinstance(self.target, str):
            return target_tracking_trajectory(t, self.state_dim)
        if isinstance(self.target, np.ndarray):
            return np.broadcast_to(self.target, t.shape + (self.state_dim,))
        if t.ndim == 0:
            return np.asarray(self.target(float(t)), dtype=float)
        return np.stack([np.asarray(self.target(float(s)), dtype=float) for s in t])

    def obstacle_table(self) -> np.ndarray:
        """``(K, 5, P)`` motion arrays plus ``(K, 3)`` radius/weight/sharpness."""
        if not self.obstacles:
            return np.zeros((0, 5, len(self.position_rows))), np.zeros((0, 3))
        motion = np.stack([o.motion_arrays() for o in self.obstacles])
        shape = np.array([[o.radius, o.weight, o.sharpness] for o in self.obstacles], dtype=float)
        return motion, shape

    def clearance(self, x, t) -> np.ndarray:
        """Distance to the nearest obstacle surface (inf without obstacles)."""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        if not self.obstacles:
            return np.full(x.shape[:-1], np.inf)
        p = x[..., list(self.position_rows)]
        gaps = [np.linalg.norm(p - o.center_at(t), axis=-1) - o.radius for o in self.obstacles]
        return np.min(np.stack(gaps), axis=0)

    def with_obstacles(self, obstacles) -> "Objective":
        return Objective(self.Q, self.P1, self.target, self.R, self.position_rows, tuple(obstacles))


def _penalty(obj: Objective, x: np.ndarray, t: np.ndarray, order: int):
    n = x.shape[-1]
    value = np.zeros(x.shape[:-1])
    grad = np.zeros(x.shape) if order >= 1 else None
    hess = np.zeros(x.shape + (n,)) if order >= 2 else None
    rows = list(obj.position_rows)
    p = x[..., rows]
    P = len(rows)
    eye = np.eye(P)
    for o in obj.obstacles:
        diff = p - o.center_at(t)
        d = np.sqrt(np.sum(diff * diff, axis=-1) + DIST_SMOOTHING**2)
        phi = o.weight * np.exp(-o.sharpness * (d - o.radius))
        value = value + phi
        if order >= 1:
            unit = diff / d[..., None]
            gp = (-o.sharpness * phi)[..., None] * unit
            grad[..., rows] += gp
        if order >= 2:
            outer = unit[..., :, None] * unit[..., None, :]
            k = o.sharpness
            hp = (k * k * phi)[..., None, None] * outer - (k * phi / d)[..., None, None] * (eye - outer)
            hess[..., np.ix_(rows, rows)[0], np.ix_(rows, rows)[1]] += hp
    return value, grad, hess


def running_cost(obj: Objective, x, t, order: int = 2):
    """Value, gradient and Hessian of the running cost at ``(x, t)``."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if x.shape[-1] != obj.state_dim:
        raise ValueError("state dimension does not match the objective")
    e = x - obj.target_at(t)
    Qe = e @ obj.Q.T
    value = 0.5 * np.sum(e * Qe, axis=-1)
    grad = Qe
    hess = np.broadcast_to(obj.Q, x.shape + (x.shape[-1],)).copy() if order >= 2 else None
    if obj.obstacles:
        pv, pg, ph = _penalty(obj, x, t, order)
        value = value + pv
        if order >= 1:
            grad = grad + pg
        if order >= 2:
            hess = hess + ph
    if order == 0:
        return value
    if order == 1:
        return value, grad
    return value, grad, hess


def terminal_cost(obj: Objective, x_f, t_f):
    x_f = np.asarray(x_f, dtype=float)
    e = x_f - obj.target_at(t_f)
    Pe = e @ obj.P1.T
    value = 0.5 * np.sum(e * Pe, axis=-1)
    return value, Pe, np.broadcast_to(obj.P1, x_f.shape + (x_f.shape[-1],)).copy()


def total_cost(obj: Objective, traj: Trajectory) -> float:
    """Trapezoidal quadrature of the running cost plus the terminal cost."""
    ell = running_cost(obj, traj.values, traj.times, order=0)
    integral = np.trapezoid(ell, traj.times) if len(traj.times) > 1 else 0.0
    return float(integral + terminal_cost(obj, traj.values[-1], traj.t_end)[0])
