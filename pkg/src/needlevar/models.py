"""Control-affine models ``x' = g(x) + h(x) u`` and the three benchmark systems.

Every model exposes the drift, the control matrix, their first spatial
derivatives and the second derivatives of each dynamics row. The built-in
models are written with numpy broadcasting so that all functions also accept
a stack of states of shape ``(K, N)``; the synthesis layer relies on that to
evaluate a whole horizon at once.

Units are native to each model: the differential drive preset works in mm
and rad/s, the rigid bodies in cm, g and s (forces in mN and torques in
uN*m are converted inside the fish model).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

# kernel ids understood by the compiled core
KERNEL_DIFF_DRIVE = 0
KERNEL_KIN_BODY = 1
KERNEL_FISH = 2

# 1 mN = 100 g*cm/s^2 and 1 uN*m = 10 g*cm^2/s^2
MN_TO_GCM = 100.0
UNM_TO_GCM2 = 10.0


class ContractError(ValueError):
    """Dimension or argument mismatch at a model boundary."""


def _levi_civita() -> np.ndarray:
    eps = np.zeros((3, 3, 3))
    eps[0, 1, 2] = eps[1, 2, 0] = eps[2, 0, 1] = 1.0
    eps[0, 2, 1] = eps[2, 1, 0] = eps[1, 0, 2] = -1.0
    return eps


EPS3 = _levi_civita()


def quat_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of (possibly stacked) quaternions ``[q0, q1, q2, q3]``."""
    q0, q1, q2, q3 = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack(
        [
            np.stack([q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3, 2 * (q1 * q2 - q0 * q3), 2 * (q1 * q3 + q0 * q2)], -1),
            np.stack([2 * (q1 * q2 + q0 * q3), q0 * q0 - q1 * q1 + q2 * q2 - q3 * q3, 2 * (q2 * q3 - q0 * q1)], -1),
            np.stack([2 * (q1 * q3 - q0 * q2), 2 * (q2 * q3 + q0 * q1), q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3], -1),
        ],
        -2,
    )


def quat_rate_matrix(q: np.ndarray) -> np.ndarray:
    """The 4x3 matrix ``G(q)`` with ``q' = 0.5 * G(q) @ omega``."""
    q0, q1, q2, q3 = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack(
        [
            np.stack([-q1, -q2, -q3], -1),
            np.stack([q0, -q3, q2], -1),
            np.stack([q3, q0, -q1], -1),
            np.stack([-q2, q1, q0], -1),
        ],
        -2,
    )


def _rotation_tensor() -> np.ndarray:
    # S[a, b] symmetric with R(q) = sum_ab q_a q_b S[a, b]
    S = np.zeros((4, 4, 3, 3))
    eye = np.eye(4)
    for a in range(4):
        S[a, a] = quat_rotation(eye[a])
    for a in range(4):
        for b in range(a + 1, 4):
            cross = quat_rotation(eye[a] + eye[b]) - S[a, a] - S[b, b]
            S[a, b] = S[b, a] = 0.5 * cross
    return S


def _rate_tensor() -> np.ndarray:
    # B[a] with G(q) = sum_a q_a B[a]
    return np.stack([quat_rate_matrix(e) for e in np.eye(4)])


ROT_S = _rotation_tensor()
RATE_B = _rate_tensor()


def normalize_quaternion(x: np.ndarray, start: int) -> np.ndarray:
    x = np.array(x, dtype=float)
    q = x[..., start : start + 4]
    x[..., start : start + 4] = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return x


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Control-affine system with analytic derivatives.

    The callables take a state (and control for ``hessians``). When
    ``vectorized`` is true they also accept stacks of states with a leading
    batch axis.

    ``control_jacobians(x)`` returns an ``(M, N, N)`` array whose k-th slice is
    the Jacobian of column k of ``h``. ``hessians(x, u)`` returns an
    ``(N, N, N)`` array whose i-th slice is the Hessian of dynamics row i
    (without the state-independent drift velocity, which has none).
    """

    name: str
    state_dim: int
    control_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    control_matrix: Callable[[np.ndarray], np.ndarray]
    drift_jacobian: Callable[[np.ndarray], np.ndarray]
    control_jacobians: Callable[[np.ndarray], np.ndarray]
    hessians: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lower: np.ndarray
    upper: np.ndarray
    position_rows: tuple = ()
    drift_velocity: Optional[np.ndarray] = None
    quat_start: Optional[int] = None
    angle_rows: tuple = ()
    vectorized: bool = False
    kernel: Optional[int] = None
    kernel_params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sampler: Optional[Callable[[np.random.Generator], np.ndarray]] = None

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != (self.control_dim,) or hi.shape != (self.control_dim,):
            raise ContractError("saturation bounds need one entry per control channel")
        if np.any(lo > hi):
            raise ContractError("saturation requires lo <= hi on every channel")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if self.drift_velocity is not None:
            dv = np.asarray(self.drift_velocity, dtype=float).reshape(-1)
            if dv.shape != (len(self.position_rows),):
                raise ContractError("drift velocity needs one entry per position row")
            object.__setattr__(self, "drift_velocity", dv)
        object.__setattr__(self, "kernel_params", np.asarray(self.kernel_params, dtype=float))

    # -- evaluation --------------------------------------------------------

    def _check(self, x, u=None):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.state_dim:
            raise ContractError(f"{self.name}: state has length {x.shape[-1]}, expected {self.state_dim}")
        if u is not None:
            u = np.asarray(u, dtype=float)
            if u.shape[-1] != self.control_dim:
                raise ContractError(f"{self.name}: control has length {u.shape[-1]}, expected {self.control_dim}")
        return x, u

    def _map(self, fn, x, *rest):
        if self.vectorized or x.ndim == 1:
            return fn(x, *rest)
        rest = [np.broadcast_to(r, x.shape[:1] + r.shape[-1:]) for r in rest]
        return np.stack([fn(xi, *(r[i] for r in rest)) for i, xi in enumerate(x)])

    def g(self, x) -> np.ndarray:
        """Drift field including the additive drift velocity on position rows."""
        x, _ = self._check(x)
        out = np.array(self._map(self.drift, x), dtype=float)
        if self.drift_velocity is not None:
            out[..., list(self.position_rows)] += self.drift_velocity
        return out

    def h(self, x) -> np.ndarray:
        x, _ = self._check(x)
        return np.asarray(self._map(self.control_matrix, x), dtype=float)

    def f(self, x, u) -> np.ndarray:
        x, u = self._check(x, u)
        return self.g(x) + np.einsum("...ij,...j->...i", self.h(x), u)

    def dg(self, x) -> np.ndarray:
        x, _ = self._check(x)
        return np.asarray(self._map(self.drift_jacobian, x), dtype=float)

    def dh(self, x) -> np.ndarray:
        x, _ = self._check(x)
        return np.asarray(self._map(self.control_jacobians, x), dtype=float)

    def jac(self, x, u) -> np.ndarray:
        """``D_x f`` at control ``u``."""
        x, u = self._check(x, u)
        return self.dg(x) + np.einsum("...kij,...k->...ij", self.dh(x), u)

    def hess(self, x, u) -> np.ndarray:
        x, u = self._check(x, u)
        return np.asarray(self._map(self.hessians, x, u), dtype=float)

    def hess_contract(self, x, u, rho) -> np.ndarray:
        """``sum_i rho_i D_x^2 f^i``."""
        return np.einsum("...i,...ijk->...jk", rho, self.hess(x, u))

    def post_step(self, x: np.ndarray) -> np.ndarray:
        if self.quat_start is None:
            return x
        return normalize_quaternion(x, self.quat_start)

    def random_state(self, rng: np.random.Generator) -> np.ndarray:
        if self.sampler is not None:
            return self.sampler(rng)
        x = rng.normal(size=self.state_dim)
        if self.quat_start is not None:
            x = normalize_quaternion(x, self.quat_start)
        return x

    def random_control(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper)

    def saturate(self, u) -> np.ndarray:
        return np.clip(u, self.lower, self.upper)


def eval_dynamics(model: SystemModel, x, u) -> np.ndarray:
    """``g(x) + h(x) u`` plus drift velocity. No clamping of ``u``."""
    return model.f(x, u)


# -- differential drive ------------------------------------------------------


@dataclass(frozen=True)
class DiffDriveParams:
    r: float = 36.0
    L: float = 258.0
    wheel_limit: float = 150.0 / 36.0

    def __post_init__(self):
        if not (self.r > 0 and self.L > 0):
            raise ContractError("wheel radius and separation must be positive")
        if not self.wheel_limit > 0:
            raise ContractError("wheel limit must be positive")


def make_diff_drive(p: DiffDriveParams = DiffDriveParams()) -> SystemModel:
    r, L = float(p.r), float(p.L)

    def drift(x):
        return np.zeros_like(x)

    def control_matrix(x):
        th = x[..., 2]
        c, s = np.cos(th), np.sin(th)
        col = np.stack([r * c, r * s, np.full_like(th, r / L)], -1)
        col2 = np.stack([r * c, r * s, np.full_like(th, -r / L)], -1)
        return np.stack([col, col2], -1)

    def drift_jacobian(x):
        return np.zeros(x.shape + (3,))

    def control_jacobians(x):
        th = x[..., 2]
        out = np.zeros(x.shape[:-1] + (2, 3, 3))
        for k in range(2):
            out[..., k, 0, 2] = -r * np.sin(th)
            out[..., k, 1, 2] = r * np.cos(th)
        return out

    def hessians(x, u):
        th = x[..., 2]
        us = u[..., 0] + u[..., 1]
        out = np.zeros(x.shape[:-1] + (3, 3, 3))
        out[..., 0, 2, 2] = -r * np.cos(th) * us
        out[..., 1, 2, 2] = -r * np.sin(th) * us
        return out

    def sampler(rng):
        return np.array([rng.uniform(-1500, 1500), rng.uniform(-1500, 1500), rng.uniform(-np.pi, np.pi)])

    lim = float(p.wheel_limit)
    return SystemModel(
        name="diff_drive",
        state_dim=3,
        control_dim=2,
        drift=drift,
        control_matrix=control_matrix,
        drift_jacobian=drift_jacobian,
        control_jacobians=control_jacobians,
        hessians=hessians,
        lower=[-lim, -lim],
        upper=[lim, lim],
        position_rows=(0, 1),
        angle_rows=(2,),
        vectorized=True,
        kernel=KERNEL_DIFF_DRIVE,
        kernel_params=np.array([r, L]),
        sampler=sampler,
    )


# -- kinematic rigid body ----------------------------------------------------

# surge F1 and heave F3 drive the body velocity; roll T1 and pitch T2 the rates
_KIN_VEL = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
_KIN_RATE = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])


def _rigid_sampler(n_extra: int, scale: float):
    def sampler(rng):
        b = rng.uniform(-scale, scale, size=3)
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        return np.concatenate([b, q, rng.normal(size=n_extra)])

    return sampler


def make_kinematic_body(
    linear_limit: float = 10.0, angular_limit: float = 10.0
) -> SystemModel:
    """Kinematic rigid body with sway and yaw removed: u = (F1, F3, T1, T2)."""

    def drift(x):
        return np.zeros_like(x)

    def control_matrix(x):
        q = x[..., 3:7]
        R = quat_rotation(q)
        G = quat_rate_matrix(q)
        out = np.zeros(x.shape[:-1] + (7, 4))
        out[..., 0:3, 0:2] = R @ _KIN_VEL
        out[..., 3:7, 2:4] = 0.5 * (G @ _KIN_RATE)
        return out

    def drift_jacobian(x):
        return np.zeros(x.shape + (7,))

    def control_jacobians(x):
        q = x[..., 3:7]
        out = np.zeros(x.shape[:-1] + (4, 7, 7))
        # d(R e_c)/dq_a = 2 sum_b S[a,b,:,c] q_b
        dR = 2.0 * np.einsum("abic,...b->...iac", ROT_S, q)  # (...,3,4,3)
        for k, c in enumerate((0, 2)):
            out[..., k, 0:3, 3:7] = dR[..., :, :, c]
        for k, c in enumerate((0, 1)):
            out[..., 2 + k, 3:7, 3:7] = 0.5 * RATE_B[:, :, c].T
        return out

    def hessians(x, u):
        w = np.stack([u[..., 0], np.zeros_like(u[..., 0]), u[..., 1]], -1)
        out = np.zeros(x.shape[:-1] + (7, 7, 7))
        out[..., 0:3, 3:7, 3:7] = 2.0 * np.einsum("abic,...c->...iab", ROT_S, w)
        return out

    return SystemModel(
        name="kin_body",
        state_dim=7,
        control_dim=4,
        drift=drift,
        control_matrix=control_matrix,
        drift_jacobian=drift_jacobian,
        control_jacobians=control_jacobians,
        hessians=hessians,
        lower=[-linear_limit, -linear_limit, -angular_limit, -angular_limit],
        upper=[linear_limit, linear_limit, angular_limit, angular_limit],
        position_rows=(0, 1, 2),
        quat_start=3,
        vectorized=True,
        kernel=KERNEL_KIN_BODY,
        kernel_params=np.zeros(0),
        sampler=_rigid_sampler(0, 50.0),
    )


# -- dynamic fish ------------------------------------------------------------


@dataclass(frozen=True)
class FishParams:
    mass: tuple = (6.04, 17.31, 8.39)
    inertia: tuple = (1.57, 27.78, 54.11)
    drift: tuple = (0.0, 0.0, 0.0)
    force_limit: float = 1.0
    torque_limit: float = 0.1

    def __post_init__(self):
        if min(self.mass) <= 0 or min(self.inertia) <= 0:
            raise ContractError("effective mass and inertia entries must be positive")
        if len(self.drift) != 3:
            raise ContractError("drift is a 3-vector")


def make_fish(p: FishParams = FishParams()) -> SystemModel:
    """Underactuated swimmer: state (b, q, v, omega), u = (F1, F3, T1, T2)."""
    Md = np.asarray(p.mass, dtype=float)
    Jd = np.asarray(p.inertia, dtype=float)
    # v' = M^-1 (M v x w): coefficients C[i,j,k] = eps_ijk M_j / M_i
    Cv = EPS3 * Md[None, :, None] / Md[:, None, None]
    Cw = EPS3 * Jd[None, :, None] / Jd[:, None, None]
    hconst = np.zeros((13, 4))
    hconst[7, 0] = MN_TO_GCM / Md[0]
    hconst[9, 1] = MN_TO_GCM / Md[2]
    hconst[10, 2] = UNM_TO_GCM2 / Jd[0]
    hconst[11, 3] = UNM_TO_GCM2 / Jd[1]

    def drift(x):
        q, v, w = x[..., 3:7], x[..., 7:10], x[..., 10:13]
        out = np.empty_like(x)
        out[..., 0:3] = np.einsum("...ij,...j->...i", quat_rotation(q), v)
        out[..., 3:7] = 0.5 * np.einsum("...ij,...j->...i", quat_rate_matrix(q), w)
        out[..., 7:10] = np.einsum("ijk,...j,...k->...i", Cv, v, w)
        out[..., 10:13] = np.einsum("ijk,...j,...k->...i", Cw, w, w)
        return out

    def control_matrix(x):
        return np.broadcast_to(hconst, x.shape[:-1] + (13, 4)).copy()

    def drift_jacobian(x):
        q, v, w = x[..., 3:7], x[..., 7:10], x[..., 10:13]
        J = np.zeros(x.shape + (13,))
        J[..., 0:3, 3:7] = 2.0 * np.einsum("abic,...b,...c->...ia", ROT_S, q, v)
        J[..., 0:3, 7:10] = quat_rotation(q)
        J[..., 3:7, 3:7] = 0.5 * np.einsum("aic,...c->...ia", RATE_B, w)
        J[..., 3:7, 10:13] = 0.5 * quat_rate_matrix(q)
        J[..., 7:10, 7:10] = np.einsum("ijk,...k->...ij", Cv, w)
        J[..., 7:10, 10:13] = np.einsum("ijk,...j->...ik", Cv, v)
        J[..., 10:13, 10:13] = np.einsum("ijk,...k->...ij", Cw, w) + np.einsum("ijk,...j->...ik", Cw, w)
        return J

    def control_jacobians(x):
        return np.zeros(x.shape[:-1] + (4, 13, 13))

    def hessians(x, u):
        q, v = x[..., 3:7], x[..., 7:10]
        H = np.zeros(x.shape[:-1] + (13, 13, 13))
        H[..., 0:3, 3:7, 3:7] = 2.0 * np.einsum("abic,...c->...iab", ROT_S, v)
        qv = 2.0 * np.einsum("abic,...b->...iac", ROT_S, q)
        H[..., 0:3, 3:7, 7:10] = qv
        H[..., 0:3, 7:10, 3:7] = np.swapaxes(qv, -1, -2)
        qw = 0.5 * np.transpose(RATE_B, (1, 0, 2))  # [i, a, c]
        H[..., 3:7, 3:7, 10:13] = qw
        H[..., 3:7, 10:13, 3:7] = np.swapaxes(qw, -1, -2)
        H[..., 7:10, 7:10, 10:13] = Cv
        H[..., 7:10, 10:13, 7:10] = np.swapaxes(Cv, -1, -2)
        H[..., 10:13, 10:13, 10:13] = Cw + np.swapaxes(Cw, -1, -2)
        return H

    drift_v = np.asarray(p.drift, dtype=float)
    fl, tl = float(p.force_limit), float(p.torque_limit)
    return SystemModel(
        name="fish",
        state_dim=13,
        control_dim=4,
        drift=drift,
        control_matrix=control_matrix,
        drift_jacobian=drift_jacobian,
        control_jacobians=control_jacobians,
        hessians=hessians,
        lower=[-fl, 0.0, -tl, -tl],
        upper=[fl, fl, tl, tl],
        position_rows=(0, 1, 2),
        drift_velocity=drift_v if np.any(drift_v != 0) else None,
        quat_start=3,
        vectorized=True,
        kernel=KERNEL_FISH,
        kernel_params=np.concatenate([Md, Jd, drift_v, [MN_TO_GCM, UNM_TO_GCM2]]),
        sampler=_rigid_sampler(6, 50.0),
    )


MODEL_BUILDERS = {
    "diff_drive": lambda **kw: make_diff_drive(DiffDriveParams(**kw)),
    "kin_body": lambda **kw: make_kinematic_body(**kw),
    "fish": lambda **kw: make_fish(FishParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in kw.items()})),
}


def build_model(name: str, **params) -> SystemModel:
    try:
        builder = MODEL_BUILDERS[name]
    except KeyError:
        raise ContractError(f"unknown model {name!r}; choose from {sorted(MODEL_BUILDERS)}") from None
    return builder(**params)


# -- derivative self-test ----------------------------------------------------


@dataclass
class DerivativeReport:
    errors: dict
    worst: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def failures(self) -> list:
        return [f"{name} entry {self.worst[name]} error {err:.3g}" for name, err in self.errors.items() if err > self.tolerance]


def _central(fn, x, steps):
    cols = []
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = steps[j]
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * steps[j]))
    return np.stack(cols, -1)


def check_derivatives(
    model: SystemModel, trials: int = 100, seed: int = 0, tolerance: float = 1e-5
) -> DerivativeReport:
    """Compare every analytic derivative with central differences at random states."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    errors = {"drift_jacobian": 0.0, "control_jacobians": 0.0, "hessians": 0.0}
    worst: dict = {k: None for k in errors}

    def record(name, analytic, numeric):
        scale = max(1.0, float(np.max(np.abs(numeric))))
        diff = np.abs(analytic - numeric) / scale
        idx = np.unravel_index(int(np.argmax(diff)), diff.shape)
        if diff[idx] > errors[name] or worst[name] is None:
            errors[name] = max(errors[name], float(diff[idx]))
            worst[name] = tuple(int(i) for i in idx)

    for _ in range(trials):
        x = model.random_state(rng)
        u = model.random_control(rng)
        # per-coordinate steps: positions in mm and angles in rad differ by 1e3
        step = 1e-5 * np.maximum(1.0, np.abs(x))
        record("drift_jacobian", model.dg(x), _central(lambda y: model.drift(y), x, step))
        numeric_dh = _central(lambda y: model.control_matrix(y), x, step)  # (N, M, N)
        record("control_jacobians", model.dh(x), np.transpose(numeric_dh, (1, 0, 2)))
        record("hessians", model.hess(x, u), _central(lambda y: model.jac(y, u), x, step))
    return DerivativeReport(errors, worst, tolerance)
