"""Needle-variation synthesis: insertion gradient and Hessian, control laws, line search.

A needle action replaces the default control ``v`` by a constant ``u`` on a
short window starting at ``tau``. For small durations ``lam``

    J(lam) - J(0) ~ lam * MIG + lam**2 / 2 * MIH

where MIG and MIH are evaluated pointwise from the costates. The second-order
law minimizes that model plus ``0.5 u^T R u``; the first-order law targets a
desired insertion gradient ``gamma * J0``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _pycore
from .adjoint import AdjointPair, DefaultControl, default_controls, solve_adjoints
from .kernels import backend
from .models import SystemModel
from .objective import Objective, running_cost, terminal_cost
from .ode import Trajectory

FIRST_ORDER = "first_order"
SECOND_ORDER = "second_order"
_MODES = {"first": FIRST_ORDER, "second": SECOND_ORDER, FIRST_ORDER: FIRST_ORDER, SECOND_ORDER: SECOND_ORDER}


def parse_mode(mode: str) -> str:
    try:
        return _MODES[mode]
    except KeyError:
        raise ValueError(f"unknown synthesis mode {mode!r}; use 'first' or 'second'") from None


@dataclass(frozen=True)
class SynthesisConfig:
    """Tuning of one synthesis step.

    ``R`` overrides the objective's control metric when given. ``epsilon_eig``
    defaults to ``1e-6 * trace(R) / M``. ``lambda_init`` defaults to an eighth
    of the horizon. ``tau_window`` limits the application-time search to the
    first part of the horizon (None searches all of it). ``insertion`` picks
    the window ``[tau, tau + lam]`` ("forward") or ``[tau - lam/2, tau + lam/2]``
    ("centered"). ``saturation`` "clip" clamps channel-wise, "scale" shrinks
    ``u - v`` uniformly into the box and "box" minimizes the regularized
    second-order model over the box; "auto" clips first-order actions and
    uses "box" for second-order ones.
    """

    horizon: float
    dt: float = 1e-3
    gamma: float = -1.0
    lambda_nominal: float = 1e-3
    R: Optional[np.ndarray] = None
    epsilon_eig: Optional[float] = None
    beta: float = 0.5
    k_max: int = 12
    c_armijo: float = 0.1
    lambda_init: Optional[float] = None
    tau_stride: int = 1
    tau_window: Optional[float] = None
    insertion: str = "forward"
    saddle_tol: float = 1e-8
    saturation: str = "auto"

    def __post_init__(self):
        if not self.horizon > 0 or not self.dt > 0:
            raise ValueError("horizon and dt must be positive")
        if not self.gamma < 0:
            raise ValueError("gamma must be negative")
        if not self.lambda_nominal > 0:
            raise ValueError("lambda_nominal must be positive")
        if self.epsilon_eig is not None and not self.epsilon_eig > 0:
            raise ValueError("epsilon_eig must be positive")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not 0 < self.c_armijo < 1:
            raise ValueError("c_armijo must lie in (0, 1)")
        if self.k_max < 1 or self.tau_stride < 1:
            raise ValueError("k_max and tau_stride must be >= 1")
        if self.insertion not in ("forward", "centered"):
            raise ValueError("insertion must be 'forward' or 'centered'")
        if self.saturation not in ("auto", "clip", "scale", "box"):
            raise ValueError("saturation must be 'auto', 'clip', 'scale' or 'box'")
        if self.R is not None:
            object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, dtype=float)))

    def metric(self, obj: Objective) -> np.ndarray:
        return obj.R if self.R is None else self.R

    def epsilon(self, obj: Objective) -> float:
        if self.epsilon_eig is not None:
            return self.epsilon_eig
        R = self.metric(obj)
        return 1e-6 * float(np.trace(R)) / R.shape[0]

    def steps(self) -> int:
        return max(1, int(round(self.horizon / self.dt)))


@dataclass(frozen=True)
class NeedleAction:
    u: np.ndarray
    tau: float
    duration: float
    predicted_dJ: float
    realized_dJ: float
    mode: str
    J0: float = 0.0
    mig: float = 0.0
    mih: float = 0.0

    @property
    def accepted(self) -> bool:
        return self.duration > 0

    def window(self, insertion: str = "forward") -> tuple:
        if insertion == "centered":
            return self.tau - 0.5 * self.duration, self.tau + 0.5 * self.duration
        return self.tau, self.tau + self.duration


# -- pointwise quantities ------------------------------------------------------


def mig(model: SystemModel, rho, x, u, v) -> np.ndarray:
    """``rho^T h(x) (u - v)``; broadcasts over a leading batch axis."""
    h = model.h(x)
    w = np.asarray(u, dtype=float) - np.asarray(v, dtype=float)
    return np.einsum("...i,...ij,...j->...", np.asarray(rho, dtype=float), h, w)


def mih(model: SystemModel, obj: Objective, rho, omega, x, u, v, t) -> np.ndarray:
    """Second derivative of the cost in the inserted duration."""
    rho = np.asarray(rho, dtype=float)
    f2 = model.f(x, u)
    f1 = model.f(x, v)
    d = f2 - f1
    D2 = model.jac(x, u)
    D1 = model.jac(x, v)
    _, lx = running_cost(obj, x, t, order=1)
    mv = lambda A, y: np.einsum("...ij,...j->...i", A, y)  # noqa: E731
    quad = np.einsum("...i,...ij,...j->...", d, np.asarray(omega, dtype=float), d)
    lin = np.einsum("...i,...i->...", rho, mv(D2, f2) + mv(D1, f1) - 2.0 * mv(D1, f2))
    return quad + lin - np.einsum("...i,...i->...", lx, d)


def mih_control_derivatives(model: SystemModel, obj: Objective, rho, omega, x, v, t):
    """``(Delta, Gamma)`` of the MIH as a quadratic in ``u``.

    With ``w = u - v`` the MIH reads ``w^T (h^T Om h + W h) w + w^T b`` where
    ``W[k] = rho^T D_x h_k``. ``Gamma`` is its Hessian and ``Delta`` the negated
    gradient at ``u = 0``, so the minimizer of the Taylor model is linear in
    both.
    """
    rho = np.asarray(rho, dtype=float)
    omega = np.asarray(omega, dtype=float)
    h = model.h(x)
    W = np.einsum("...i,...kij->...kj", rho, model.dh(x))
    D1 = model.jac(x, v)
    f1 = model.f(x, v)
    _, lx = running_cost(obj, x, t, order=1)
    ht = np.swapaxes(h, -1, -2)
    Wh = W @ h
    Gamma = ht @ (omega + np.swapaxes(omega, -1, -2)) @ h + Wh + np.swapaxes(Wh, -1, -2)
    b = (
        np.einsum("...kj,...j->...k", W, f1)
        - np.einsum("...ik,...i->...k", h, np.einsum("...ji,...j->...i", D1, rho))
        - np.einsum("...ik,...i->...k", h, lx)
    )
    Delta = np.einsum("...kl,...l->...k", Gamma, np.asarray(v, dtype=float)) - b
    return Delta, Gamma


def regularize_hessian(H, epsilon: float) -> np.ndarray:
    """Floor the eigenvalues of symmetric ``H`` at ``epsilon`` (stacks allowed)."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    H = np.asarray(H, dtype=float)
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    d, V = np.linalg.eigh(H)
    d = np.maximum(d, epsilon)
    return (V * d[..., None, :]) @ np.swapaxes(V, -1, -2)


def saturate(u, model: SystemModel) -> np.ndarray:
    return model.saturate(u)


def scale_to_box(u, v, model: SystemModel) -> np.ndarray:
    """Shrink ``u - v`` uniformly until ``u`` fits the saturation box.

    Channels where ``v`` already sits on the bound that ``u - v`` points past
    are clamped instead, so one-sided limits do not zero the whole action.
    """
    u = np.asarray(u, dtype=float)
    v = np.broadcast_to(np.asarray(v, dtype=float), u.shape)
    vin = np.clip(v, model.lower, model.upper)
    d = u - vin
    room = np.where(d > 0, model.upper - vin, vin - model.lower)
    d = np.where((room <= 0) & (d != 0), 0.0, d)
    mag = np.abs(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(mag > 0, room / mag, np.inf)
    s = np.minimum(1.0, np.min(ratio, axis=-1, keepdims=True))
    return np.clip(vin + s * d, model.lower, model.upper)


def box_quadratic_min(H, g, lower, upper) -> np.ndarray:
    """Minimize ``0.5 u^T H u - g^T u`` over ``lower <= u <= upper``.

    ``H`` must be positive definite. Every split of the channels into
    free / at-lower / at-upper is tried, which is exact and cheap for the
    handful of inputs these systems have. Broadcasts over a leading batch axis.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    M = g.shape[-1]
    lo = np.broadcast_to(np.asarray(lower, dtype=float), g.shape)
    hi = np.broadcast_to(np.asarray(upper, dtype=float), g.shape)
    best_u = np.zeros_like(g)
    best_val = np.full(g.shape[:-1], np.inf)
    for pattern in itertools.product((0, 1, 2), repeat=M):
        pat = np.array(pattern)
        free = pat == 0
        if not (np.all(np.isfinite(lo[..., pat == 1])) and np.all(np.isfinite(hi[..., pat == 2]))):
            continue
        u = np.where(pat == 1, lo, np.where(pat == 2, hi, 0.0))
        ok = np.ones(g.shape[:-1], dtype=bool)
        if free.any():
            fixed = ~free
            Hf = H[..., free, :][..., :, free]
            rf = g[..., free] - np.einsum("...ij,...j->...i", H[..., free, :][..., :, fixed], u[..., fixed])
            uf = np.linalg.solve(Hf, rf[..., None])[..., 0]
            tol = 1e-12 * (1.0 + np.abs(uf))
            ok = np.all((uf >= lo[..., free] - tol) & (uf <= hi[..., free] + tol), axis=-1)
            u = u.copy()
            u[..., free] = np.clip(uf, lo[..., free], hi[..., free])
        val = 0.5 * np.einsum("...i,...ij,...j->...", u, H, u) - np.einsum("...i,...i->...", g, u)
        take = ok & (val < best_val)
        best_val = np.where(take, val, best_val)
        best_u = np.where(take[..., None], u, best_u)
    return best_u


def _to_box(direction: np.ndarray, base: np.ndarray, model: SystemModel) -> np.ndarray:
    # scale so the first channel to reach its bound sits on it
    room = np.where(direction > 0, model.upper - base, base - model.lower)
    mag = np.abs(direction)
    ok = (mag > 1e-300) & (room > 0)
    if not np.any(ok):
        return base.copy()
    s = float(np.min(room[ok] / mag[ok]))
    return base + s * direction


def _orient(e: np.ndarray, lin: np.ndarray) -> np.ndarray:
    slope = float(e @ lin)
    if slope > 0:
        return -e
    if slope == 0:
        nz = np.flatnonzero(np.abs(e) > 1e-12)
        if len(nz) and e[nz[0]] < 0:
            return -e
    return e


def second_order_action(
    model: SystemModel,
    obj: Objective,
    rho,
    omega,
    x,
    v,
    t,
    cfg: SynthesisConfig,
    _derivs=None,
    box: bool = False,
) -> np.ndarray:
    """Minimizer of the Taylor model with a spectrally regularized Hessian.

    Near saddle points of the model (vanishing gradient with negative
    curvature) the most-negative-curvature direction is returned instead,
    scaled to the saturation box. With ``box`` the regularized model is
    minimized over the saturation box rather than unconstrained.
    Broadcasts over a leading batch axis.
    """
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    lam = cfg.lambda_nominal
    R = cfg.metric(obj)
    eps = cfg.epsilon(obj)
    M = model.control_dim
    vv = np.broadcast_to(np.asarray(v, dtype=float), x.shape[:-1] + (M,))
    Delta, Gamma = _derivs if _derivs is not None else mih_control_derivatives(model, obj, rho, omega, x, vv, t)
    htr = np.einsum("...ik,...i->...k", model.h(x), np.asarray(rho, dtype=float))
    H = 0.5 * lam * lam * Gamma + R
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    rhs = 0.5 * lam * lam * Delta - lam * htr
    d, V = np.linalg.eigh(H)
    dbar = np.maximum(d, eps)
    if box:
        Hbar = (V * dbar[..., None, :]) @ np.swapaxes(V, -1, -2)
        u = box_quadratic_min(Hbar, rhs, model.lower, model.upper)
    else:
        u = np.einsum("...ij,...j->...i", V, np.einsum("...ji,...j->...i", V, rhs) / dbar)

    # gradient of the model at the default control
    grad0 = np.einsum("...ij,...j->...i", H, vv) - rhs
    scale = lam * np.linalg.norm(htr, axis=-1) + 0.5 * lam * lam * np.linalg.norm(Delta, axis=-1)
    flat = np.linalg.norm(grad0, axis=-1) <= cfg.saddle_tol * np.maximum(scale, 1.0)
    if not np.any(flat):
        return u
    gd, gV = np.linalg.eigh(0.5 * (Gamma + np.swapaxes(Gamma, -1, -2)))
    u = np.array(u, copy=True)
    idx = np.ndindex(x.shape[:-1]) if batched else [()]
    for i in idx:
        if not flat[i]:
            continue
        if d[i][0] < -eps:
            e = V[i][:, 0]
        elif gd[i][0] < 0:
            e = gV[i][:, 0]
        else:
            continue
        e = _orient(e, lam * htr[i] - 0.5 * lam * lam * Delta[i])
        u[i] = _to_box(e, np.asarray(vv[i], dtype=float), model)
    return u


def first_order_action(model: SystemModel, rho, x, v, t, cfg: SynthesisConfig, J0: float, obj: Optional[Objective] = None) -> np.ndarray:
    """``(Lambda + R^T)^-1 (Lambda v + h^T rho * gamma * J0)``, ``Lambda = h^T rho rho^T h``."""
    if J0 < 0:
        raise ValueError("J0 must be non-negative")
    if cfg.R is None and obj is None:
        raise ValueError("need cfg.R or an objective for the control metric")
    R = cfg.R if cfg.R is not None else obj.R
    x = np.asarray(x, dtype=float)
    M = model.control_dim
    vv = np.broadcast_to(np.asarray(v, dtype=float), x.shape[:-1] + (M,))
    htr = np.einsum("...ik,...i->...k", model.h(x), np.asarray(rho, dtype=float))
    Lam = htr[..., :, None] * htr[..., None, :]
    alpha = cfg.gamma * J0
    rhs = np.einsum("...ij,...j->...i", Lam, vv) + htr * alpha
    return np.linalg.solve(Lam + R.T, rhs[..., None])[..., 0]


def select_tau(times, curve) -> float:
    """Time of the smallest curve value; ties go to the earliest time."""
    times = np.asarray(times, dtype=float)
    curve = np.asarray(curve, dtype=float)
    if len(times) == 0 or len(times) != len(curve):
        raise ValueError("need one curve value per grid time")
    return float(times[int(np.argmin(curve))])


# -- simulation ------------------------------------------------------------------


@dataclass(frozen=True)
class Rollout:
    traj: Trajectory
    cost: float


def _kernel_ready(model: SystemModel, obj: Objective, v) -> bool:
    return model.kernel is not None and obj.target_kind is not None and not callable(v)


def rollout(
    model: SystemModel,
    obj: Objective,
    x0,
    t0: float,
    horizon: float,
    dt: float,
    v: DefaultControl = None,
    u=None,
    window: tuple = (0.0, 0.0),
) -> Rollout:
    """Simulate the default control with ``u`` inserted on ``window``.

    The running cost is integrated alongside the state with the same RK4
    stages; the terminal cost is added at the end. Divergence returns an
    infinite cost and a trajectory padded with NaN.
    """
    n = max(1, int(round(horizon / dt)))
    h = horizon / n
    M = model.control_dim
    t_on, t_off = float(window[0]), float(window[1])
    uu = np.zeros(M) if u is None else np.ascontiguousarray(u, dtype=float)
    x0 = np.ascontiguousarray(x0, dtype=float)
    if _kernel_ready(model, obj, v):
        vv = np.ascontiguousarray(default_controls(v, [t0], M)[0])
        motion, shape = obj.obstacle_table()
        target = obj.target if obj.target_kind == 0 else np.zeros(obj.state_dim)
        states, derivs, integral, ok = backend.rollout(
            int(model.kernel), np.ascontiguousarray(model.kernel_params, dtype=float), x0, float(t0), h, n,
            vv, uu, t_on, t_off, np.ascontiguousarray(obj.Q), int(obj.target_kind),
            np.ascontiguousarray(target, dtype=float), np.asarray(obj.position_rows, dtype=np.int64),
            np.ascontiguousarray(motion, dtype=float), np.ascontiguousarray(shape, dtype=float),
        )
    else:
        states, derivs, integral, ok = _rollout_generic(model, obj, x0, t0, h, n, v, uu, t_on, t_off)
    times = t0 + h * np.arange(n + 1)
    times[-1] = t0 + horizon
    if not ok:
        bad = ~np.all(np.isfinite(states), axis=1)
        states = np.where(bad[:, None], states[np.argmax(bad) - 1], states)
        derivs = np.nan_to_num(derivs)
        return Rollout(Trajectory(times, states, derivs), math.inf)
    cost = float(integral) + float(terminal_cost(obj, states[-1], times[-1])[0])
    return Rollout(Trajectory(times, states, derivs), cost)


def _rollout_generic(model, obj, x0, t0, h, n, v, u, t_on, t_off):
    ell = lambda x, t: float(running_cost(obj, x, t, order=0))  # noqa: E731
    if callable(v):
        vfun = lambda t: np.asarray(v(t), dtype=float)  # noqa: E731
    else:
        vc = default_controls(v, [t0], model.control_dim)[0]
        vfun = lambda t: vc  # noqa: E731
    return _pycore.rollout_fn(model.f, ell, model.post_step, x0, t0, h, n, vfun, u, t_on, t_off)


def insertion_window(tau: float, lam: float, cfg: SynthesisConfig, t0: float, t1: float) -> tuple:
    if cfg.insertion == "centered":
        a, b = tau - 0.5 * lam, tau + 0.5 * lam
    else:
        a, b = tau, tau + lam
    return max(a, t0), min(b, t1)


def cost_of_duration(model, obj, x0, t0, cfg: SynthesisConfig, u, tau: float, lam: float, v: DefaultControl = None) -> float:
    """``J(lam)`` for the action ``u`` inserted at ``tau``."""
    win = insertion_window(tau, lam, cfg, t0, t0 + cfg.horizon)
    return rollout(model, obj, x0, t0, cfg.horizon, cfg.dt, v, u, win).cost


def line_search_duration(
    model: SystemModel,
    obj: Objective,
    default: Rollout,
    u,
    tau: float,
    cfg: SynthesisConfig,
    mig_value: float,
    v: DefaultControl = None,
):
    """Backtracking on the inserted duration.

    Starts at ``lambda_init`` (an eighth of the horizon by default) and
    shrinks by ``beta`` until ``J(lam) - J(0) <= c * lam * MIG``; with a
    non-negative MIG plain decrease is required. Returns ``(0, 0)`` after
    ``k_max`` failures.
    """
    traj = default.traj
    J0 = default.cost
    t0, t1 = traj.t0, traj.t_end
    lam = cfg.lambda_init if cfg.lambda_init is not None else cfg.horizon / 8.0
    if cfg.insertion == "forward":
        lam = min(lam, t1 - tau)
    if not lam > 0:
        return 0.0, 0.0
    vv = default_controls(v, [tau], model.control_dim)[0]
    if np.allclose(np.asarray(u, dtype=float), vv, rtol=0.0, atol=1e-15):
        return 0.0, 0.0
    x0 = traj.values[0]
    slope = mig_value if mig_value < -1e-12 * max(1.0, abs(J0)) else 0.0
    for _ in range(cfg.k_max):
        dJ = cost_of_duration(model, obj, x0, t0, cfg, u, tau, lam, v) - J0
        if slope < 0:
            if dJ <= cfg.c_armijo * lam * slope:
                return lam, dJ
        elif dJ < 0:
            return lam, dJ
        lam *= cfg.beta
    return 0.0, 0.0


@dataclass(frozen=True)
class HorizonPlan:
    """Everything computed on one horizon: curves per grid time plus the action."""

    default: Rollout
    adjoints: AdjointPair
    times: np.ndarray
    controls: np.ndarray
    mig_curve: np.ndarray
    mih_curve: Optional[np.ndarray]
    model_curve: np.ndarray
    action: NeedleAction


def plan_horizon(
    model: SystemModel,
    obj: Objective,
    x_now,
    t_now: float,
    cfg: SynthesisConfig,
    mode: str = SECOND_ORDER,
    v: DefaultControl = None,
    search: bool = True,
) -> HorizonPlan:
    mode = parse_mode(mode)
    default = rollout(model, obj, x_now, t_now, cfg.horizon, cfg.dt, v)
    if not math.isfinite(default.cost):
        raise FloatingPointError(f"default rollout diverged from t={t_now:.6g}")
    traj = default.traj
    second = mode == SECOND_ORDER
    adj = solve_adjoints(model, obj, traj, v, second_order=second)
    idx = np.arange(0, len(traj), cfg.tau_stride)
    if cfg.insertion == "forward":
        idx = idx[idx < len(traj) - 1]
    if cfg.tau_window is not None:
        idx = idx[traj.times[idx] <= t_now + cfg.tau_window + 1e-12]
    if len(idx) == 0:
        idx = np.array([0])
    ts = traj.times[idx]
    xs = traj.values[idx]
    rhos = adj.rho.values[idx]
    vs = default_controls(v, ts, model.control_dim)
    J0 = default.cost
    lam = cfg.lambda_nominal
    if second:
        oms = adj.omega.values[idx]
        derivs = mih_control_derivatives(model, obj, rhos, oms, xs, vs, ts)
        box = cfg.saturation in ("auto", "box")
        us = second_order_action(model, obj, rhos, oms, xs, vs, ts, cfg, _derivs=derivs, box=box)
    else:
        us = first_order_action(model, rhos, xs, vs, ts, cfg, max(J0, 0.0), obj)
    if cfg.saturation == "scale":
        us = scale_to_box(us, vs, model)
    else:
        us = model.saturate(us)
    g1 = mig(model, rhos, xs, us, vs)
    if second:
        g2 = mih(model, obj, rhos, oms, xs, us, vs, ts)
        curve = lam * g1 + 0.5 * lam * lam * g2
    else:
        g2 = None
        curve = g1
    k = int(np.argmin(curve))
    tau = float(ts[k])
    u = us[k]
    mig_k = float(g1[k])
    mih_k = float(g2[k]) if g2 is not None else 0.0
    dur, realized = (0.0, 0.0)
    if search:
        dur, realized = line_search_duration(model, obj, default, u, tau, cfg, mig_k, v)
    lam_pred = dur if dur > 0 else lam
    predicted = lam_pred * mig_k + (0.5 * lam_pred * lam_pred * mih_k if second else 0.0)
    action = NeedleAction(u=u, tau=tau, duration=dur, predicted_dJ=predicted, realized_dJ=realized,
                          mode=mode, J0=J0, mig=mig_k, mih=mih_k)
    return HorizonPlan(default, adj, ts, us, g1, g2, curve, action)


def feedback_step(
    model: SystemModel,
    obj: Objective,
    x_now,
    t_now: float,
    cfg: SynthesisConfig,
    mode: str = SECOND_ORDER,
    v: DefaultControl = None,
) -> NeedleAction:
    """One pass of the synthesis loop: simulate, solve costates, pick ``u``, ``tau`` and the duration."""
    return plan_horizon(model, obj, x_now, t_now, cfg, mode, v).action
