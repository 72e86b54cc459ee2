"""Pure-Python kernels; the compiled ``_core`` mirrors these signatures.

``rollout`` integrates a switched trajectory (default control ``v`` with the
inserted control ``u`` on ``[t_on, t_off)``) together with the running cost.
RK4 steps that straddle a switching instant are split there so the grid
stays fixed. ``sweep_rho`` and ``sweep_omega`` run the linear costate ODEs
backward over the given step lengths; their coefficient arrays interleave
grid nodes (even rows) and step midpoints (odd rows).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import models as _models
from .objective import DIST_SMOOTHING, target_tracking_trajectory


def _step_pieces(t, h, t_on, t_off):
    cuts = [t]
    for s in sorted((t_on, t_off)):
        if t < s < t + h and s != cuts[-1]:
            cuts.append(s)
    cuts.append(t + h)
    return cuts


def rollout_fn(f, ell, post, x0, t0, dt, n, v, u, t_on, t_off):
    """Generic switched RK4 with cost quadrature.

    ``f(x, w)`` dynamics, ``ell(x, t)`` running cost, ``post(x)`` applied
    after each full step; ``v`` is a constant vector or a function of time.
    Returns ``(states, derivs, integral, ok)``.
    """
    x = np.array(x0, dtype=float)
    N = x.shape[0]
    states = np.empty((n + 1, N))
    derivs = np.empty((n + 1, N))
    states[0] = x
    u = np.asarray(u, dtype=float)
    if callable(v):
        vfun = v
    else:
        vc = np.asarray(v, dtype=float)
        vfun = lambda tm: vc  # noqa: E731
    total = 0.0
    comp = 0.0
    ok = True

    def ctrl(on, tm):
        return u if on else vfun(tm)

    for k in range(n):
        t = t0 + k * dt
        derivs[k] = f(x, ctrl(t_on <= t < t_off, t))
        cuts = _step_pieces(t, dt, t_on, t_off)
        for a, b in zip(cuts[:-1], cuts[1:]):
            h = b - a
            on = t_on <= 0.5 * (a + b) < t_off
            k1 = f(x, ctrl(on, a))
            c1 = ell(x, a)
            x2 = x + 0.5 * h * k1
            k2 = f(x2, ctrl(on, a + 0.5 * h))
            c2 = ell(x2, a + 0.5 * h)
            x3 = x + 0.5 * h * k2
            k3 = f(x3, ctrl(on, a + 0.5 * h))
            c3 = ell(x3, a + 0.5 * h)
            x4 = x + h * k3
            k4 = f(x4, ctrl(on, b))
            c4 = ell(x4, b)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            # compensated sum: cost differences between rollouts sit far below J
            inc = (h / 6.0) * (c1 + 2 * c2 + 2 * c3 + c4)
            tsum = total + inc
            comp += (total - tsum) + inc if abs(total) >= abs(inc) else (inc - tsum) + total
            total = tsum
        x = post(x)
        if not (np.all(np.isfinite(x)) and np.isfinite(total)):
            ok = False
            states[k + 1 :] = np.nan
            derivs[k:] = np.nan
            return states, derivs, total + comp, ok
        states[k + 1] = x
    tn = t0 + n * dt
    derivs[n] = f(x, ctrl(t_on <= tn < t_off, tn))
    return states, derivs, total + comp, ok


@lru_cache(maxsize=32)
def _model_for(code: int, params: tuple):
    if code == _models.KERNEL_DIFF_DRIVE:
        return _models.make_diff_drive(_models.DiffDriveParams(r=params[0], L=params[1]))
    if code == _models.KERNEL_KIN_BODY:
        return _models.make_kinematic_body()
    if code == _models.KERNEL_FISH:
        return _models.make_fish(_models.FishParams(mass=params[0:3], inertia=params[3:6], drift=params[6:9]))
    raise ValueError(f"unknown kernel id {code}")


def make_cost(qmat, target_kind, target, pos_rows, obs_motion, obs_shape):
    qmat = np.asarray(qmat, dtype=float)
    target = np.asarray(target, dtype=float)
    rows = list(np.asarray(pos_rows, dtype=int))
    N = qmat.shape[0]

    def ell(x, t):
        if target_kind == 1:
            xd = target_tracking_trajectory(t, N)
        else:
            xd = target
        e = x - xd
        val = 0.5 * float(e @ qmat @ e)
        if len(obs_shape):
            p = x[rows]
            for m, (rad, w, k) in zip(obs_motion, obs_shape):
                c = m[0] + m[1] * t + m[2] * np.sin(m[3] * t + m[4])
                diff = p - c
                d = np.sqrt(diff @ diff + DIST_SMOOTHING**2)
                val += w * np.exp(-k * (d - rad))
        return val

    return ell


def rollout(
    model_code, mparams, x0, t0, dt, n, v, u, t_on, t_off,
    qmat, target_kind, target, pos_rows, obs_motion, obs_shape,
):
    model = _model_for(int(model_code), tuple(float(p) for p in mparams))
    ell = make_cost(qmat, target_kind, target, pos_rows, obs_motion, obs_shape)
    return rollout_fn(model.f, ell, model.post_step, x0, t0, dt, n, v, u, t_on, t_off)


def sweep_rho(A, b, rho_end, steps):
    """Backward RK4 of ``rho' = -b - A^T rho`` from the last node."""
    n = (A.shape[0] - 1) // 2
    N = rho_end.shape[0]
    out = np.empty((n + 1, N))
    y = np.array(rho_end, dtype=float)
    out[n] = y

    def F(i, r):
        return -b[i] - A[i].T @ r

    for k in range(n - 1, -1, -1):
        h = steps[k]
        i1, im, i0 = 2 * k + 2, 2 * k + 1, 2 * k
        k1 = F(i1, y)
        k2 = F(im, y - 0.5 * h * k1)
        k3 = F(im, y - 0.5 * h * k2)
        k4 = F(i0, y - h * k3)
        y = y - (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            out[: k + 1] = np.nan
            return out
        out[k] = y
    return out


def sweep_omega(A, C, omega_end, steps):
    """Backward RK4 of ``Om' = -A^T Om - Om A - C``, symmetrized every step."""
    n = (A.shape[0] - 1) // 2
    N = omega_end.shape[0]
    out = np.empty((n + 1, N, N))
    y = 0.5 * (omega_end + omega_end.T)
    out[n] = y

    def F(i, om):
        AtO = A[i].T @ om
        return -AtO - AtO.T - C[i]

    for k in range(n - 1, -1, -1):
        h = steps[k]
        i1, im, i0 = 2 * k + 2, 2 * k + 1, 2 * k
        k1 = F(i1, y)
        k2 = F(im, y - 0.5 * h * k1)
        k3 = F(im, y - 0.5 * h * k2)
        k4 = F(i0, y - h * k3)
        y = y - (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        y = 0.5 * (y + y.T)
        if not np.all(np.isfinite(y)):
            out[: k + 1] = np.nan
            return out
        out[k] = y
    return out
