"""Fixed-step RK4 integration with dense storage and cubic Hermite sampling.

Forward and backward passes share one grid so that costates can be read at
exactly the times the state was stored. Backward problems are integrated as
forward problems in the reversed time ``s = t1 - t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

Field = Callable[[float, np.ndarray], np.ndarray]


class IntegrationDiverged(RuntimeError):
    """Raised when a non-finite value shows up mid-integration."""

    def __init__(self, t: float, what: str = "state"):
        super().__init__(f"non-finite {what} at t={t:.6g}")
        self.t = t


def _fd_derivatives(times: np.ndarray, values: np.ndarray) -> np.ndarray:
    # second-order accurate everywhere, exact for quadratics
    n = len(times)
    d = np.empty_like(values)
    if n == 1:
        d[:] = 0.0
        return d
    if n == 2:
        d[:] = (values[1] - values[0]) / (times[1] - times[0])
        return d
    h0 = times[1:-1] - times[:-2]
    h1 = times[2:] - times[1:-1]
    shape = (-1,) + (1,) * (values.ndim - 1)
    a = (-h1 / (h0 * (h0 + h1))).reshape(shape)
    b = ((h1 - h0) / (h0 * h1)).reshape(shape)
    c = (h0 / (h1 * (h0 + h1))).reshape(shape)
    d[1:-1] = a * values[:-2] + b * values[1:-1] + c * values[2:]
    for end, (i0, i1, i2) in ((0, (0, 1, 2)), (-1, (-1, -2, -3))):
        t0, t1, t2 = times[i0], times[i1], times[i2]
        y0, y1, y2 = values[i0], values[i1], values[i2]
        # derivative at t0 of the quadratic through the three points
        l0 = (2 * t0 - t1 - t2) / ((t0 - t1) * (t0 - t2))
        l1 = (t0 - t2) / ((t1 - t0) * (t1 - t2))
        l2 = (t0 - t1) / ((t2 - t0) * (t2 - t1))
        d[end] = l0 * y0 + l1 * y1 + l2 * y2
    return d


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-indexed curve of vectors (or matrices) with Hermite interpolation.

    ``derivs`` holds the time derivative at every node. When omitted it is
    estimated with second-order finite differences.
    """

    times: np.ndarray
    values: np.ndarray
    derivs: Optional[np.ndarray] = None

    def __post_init__(self):
        times = np.ascontiguousarray(self.times, dtype=float)
        values = np.ascontiguousarray(self.values, dtype=float)
        if times.ndim != 1 or len(times) == 0:
            raise ValueError("times must be a non-empty 1-d array")
        if len(values) != len(times):
            raise ValueError("one sample per time required")
        if len(times) > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("times must be strictly increasing")
        derivs = self.derivs
        if derivs is None:
            derivs = _fd_derivatives(times, values)
        derivs = np.ascontiguousarray(derivs, dtype=float)
        if derivs.shape != values.shape:
            raise ValueError("derivs must match values in shape")
        for arr in (times, values, derivs):
            arr.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "derivs", derivs)

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def dim(self) -> int:
        return int(np.prod(self.values.shape[1:]))

    def __len__(self) -> int:
        return len(self.times)

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def __call__(self, t: float) -> np.ndarray:
        return sample(self, t)


class MatrixTrajectory(Trajectory):
    """Trajectory of square matrices, symmetrized on construction."""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3 or values.shape[1] != values.shape[2]:
            raise ValueError("matrix samples must be N x N")
        object.__setattr__(self, "values", 0.5 * (values + values.transpose(0, 2, 1)))
        if self.derivs is not None:
            d = np.asarray(self.derivs, dtype=float)
            object.__setattr__(self, "derivs", 0.5 * (d + d.transpose(0, 2, 1)))
        super().__post_init__()


def _hermite(y0, y1, d0, d1, h, s):
    s2 = s * s
    s3 = s2 * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    return h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1


def sample(traj: Trajectory, t: float) -> np.ndarray:
    """Cubic Hermite interpolation; exact at the stored nodes."""
    times = traj.times
    span = max(abs(times[0]), abs(times[-1]), 1.0)
    tol = 1e-12 * span
    if t < times[0] - tol or t > times[-1] + tol:
        raise ValueError(f"t={t!r} outside [{times[0]!r}, {times[-1]!r}]")
    if len(times) == 1:
        return traj.values[0].copy()
    k = int(np.searchsorted(times, t, side="right")) - 1
    k = min(max(k, 0), len(times) - 2)
    if t == times[k]:
        return traj.values[k].copy()
    h = times[k + 1] - times[k]
    s = min(max((t - times[k]) / h, 0.0), 1.0)
    return _hermite(traj.values[k], traj.values[k + 1], traj.derivs[k], traj.derivs[k + 1], h, s)


def midpoints(traj: Trajectory) -> np.ndarray:
    """Hermite values halfway between consecutive nodes (vectorized)."""
    v, d = traj.values, traj.derivs
    h = np.diff(traj.times).reshape((-1,) + (1,) * (v.ndim - 1))
    return 0.5 * (v[:-1] + v[1:]) + h / 8.0 * (d[:-1] - d[1:])


def make_grid(t0: float, t1: float, dt: float) -> np.ndarray:
    """Uniform steps of ``dt`` from t0, with a shortened last step landing on t1."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not t1 > t0:
        raise ValueError("t1 must exceed t0")
    n = int(np.floor((t1 - t0) / dt + 1e-9))
    times = t0 + dt * np.arange(n + 1)
    if t1 - times[-1] > 1e-9 * dt:
        times = np.append(times, t1)
    else:
        times[-1] = t1
    return times


def rk4_step(field: Field, t: float, x: np.ndarray, h: float) -> np.ndarray:
    k1 = field(t, x)
    k2 = field(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = field(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = field(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(
    field: Field,
    x0,
    t0: float,
    t1: float,
    dt: float,
    post_step: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> Trajectory:
    """Classical RK4 from t0 to t1 storing every step.

    ``post_step`` is applied to the state after each step (used for
    quaternion renormalization).
    """
    times = make_grid(t0, t1, dt)
    x = np.array(x0, dtype=float)
    shape = x.shape
    values = np.empty((len(times),) + shape)
    derivs = np.empty_like(values)
    values[0] = x
    for k in range(len(times) - 1):
        t, h = times[k], times[k + 1] - times[k]
        derivs[k] = field(t, x)
        x = rk4_step(field, t, x, h)
        if post_step is not None:
            x = post_step(x)
        if not np.all(np.isfinite(x)):
            raise IntegrationDiverged(times[k + 1])
        values[k + 1] = x
    derivs[-1] = field(times[-1], x)
    if not np.all(np.isfinite(derivs)):
        raise IntegrationDiverged(times[-1], "derivative")
    return Trajectory(times, values, derivs)


def integrate_backward(
    field: Field, x_end, t0: float, t1: float, dt: float
) -> Trajectory:
    """Integrate ``x' = field(t, x)`` from t1 down to t0.

    Done as a forward integration in ``s = t1 - t``; the returned
    trajectory is indexed by ``t`` in increasing order.
    """
    rev = integrate(lambda s, y: -field(t1 - s, y), x_end, 0.0, t1 - t0, dt)
    times = t1 - rev.times[::-1]
    times[0] = t0
    return Trajectory(times, rev.values[::-1], -rev.derivs[::-1])
