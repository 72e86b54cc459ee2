import dataclasses
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from needlevar.adjoint import solve_adjoints
from needlevar.needle import (
    FIRST_ORDER,
    SECOND_ORDER,
    SynthesisConfig,
    box_quadratic_min,
    cost_of_duration,
    feedback_step,
    first_order_action,
    line_search_duration,
    mig,
    mih,
    mih_control_derivatives,
    plan_horizon,
    regularize_hessian,
    rollout,
    saturate,
    scale_to_box,
    second_order_action,
    select_tau,
)
from needlevar.objective import Objective, running_cost
from oracles import insertion_check, setup


def retarget(obj, target):
    return Objective(obj.Q, obj.P1, np.asarray(target, float), obj.R, obj.position_rows, obj.obstacles)


def costates(model, obj, cfg, x0):
    tr = rollout(model, obj, x0, 0.0, cfg.horizon, cfg.dt).traj
    adj = solve_adjoints(model, obj, tr)
    return tr, adj


def random_instance(name, rng):
    model, obj, cfg = setup(name)
    x = model.random_state(rng)
    N = model.state_dim
    rho = rng.normal(size=N) * 10
    A = rng.normal(size=(N, N))
    om = A + A.T
    v = model.random_control(rng)
    return model, obj, cfg, x, rho, om, v


# -- MIG / MIH -------------------------------------------------------------------


def test_mig_basic_identities():
    model, obj, cfg = setup("diff_drive")
    x = np.array([1.0, 2.0, 0.3])
    rho = np.array([3.0, -1.0, 2.0])
    v = np.array([0.5, -0.2])
    u = np.array([2.0, 1.0])
    assert mig(model, rho, x, v, v) == 0.0
    assert mig(model, rho, x, 2 * v - u, v) == pytest.approx(-mig(model, rho, x, u, v), rel=1e-14)


def test_mig_diff_drive_finite_difference():
    model, obj, cfg = setup("diff_drive", dt=1e-3)
    obj = retarget(obj, [1000.0, 1000.0, 0.0])
    c = insertion_check(model, obj, cfg, np.zeros(3), np.array([1.0, 1.0]))
    assert c.mig_rel < 0.02


def test_mih_zero_at_default_and_finite_difference():
    model, obj, cfg = setup("diff_drive", dt=1e-3)
    obj = retarget(obj, [1000.0, 1000.0, 0.0])
    x0 = np.array([-200.0, 300.0, 0.7])
    tr, adj = costates(model, obj, cfg, x0)
    v = np.zeros(2)
    assert mih(model, obj, adj.rho.values[5], adj.omega.values[5], tr.values[5], v, v, tr.times[5]) == 0.0
    c = insertion_check(model, obj, cfg, x0, np.array([3.0, -2.0]), lambdas=(1e-3, 5e-4, 2.5e-4))
    assert c.mih_rel < 0.05


def test_mih_negative_at_first_order_singular_state():
    model, obj, cfg = setup("diff_drive")
    obj = retarget(obj, [0.0, 1000.0, 0.0])  # target straight to the side
    x0 = np.zeros(3)
    tr, adj = costates(model, obj, cfg, x0)
    rho, om = adj.rho.values[0], adj.omega.values[0]
    assert np.max(np.abs(rho @ model.h(x0))) < 1e-8
    g = np.linspace(model.lower[0], model.upper[0], 21)
    U = np.array(list(itertools.product(g, g)))
    vals = mih(model, obj, rho, om, np.broadcast_to(x0, (len(U), 3)), U, np.zeros(2), 0.0)
    assert vals.min() < 0


# -- Delta / Gamma ---------------------------------------------------------------


def test_delta_gamma_vanish_without_costates():
    model, obj, cfg = setup("diff_drive")
    obj = retarget(obj, [0.0, 0.0, 0.0])
    D, G = mih_control_derivatives(model, obj, np.zeros(3), np.zeros((3, 3)), np.zeros(3), np.zeros(2), 0.0)
    assert np.all(D == 0) and np.all(G == 0)


@pytest.mark.parametrize("name", ("diff_drive", "kin_body", "fish"))
def test_gamma_quadratic_identity(name):
    rng = np.random.default_rng(11)
    for _ in range(10):
        model, obj, cfg, x, rho, om, v = random_instance(name, rng)
        D, G = mih_control_derivatives(model, obj, rho, om, x, v, 0.3)
        u = rng.normal(size=model.control_dim)
        lhs = u @ G @ u
        rhs = mih(model, obj, rho, om, x, v + u, v, 0.3) + mih(model, obj, rho, om, x, v - u, v, 0.3)
        assert lhs == pytest.approx(rhs, abs=1e-8 * max(1.0, abs(lhs)))


@pytest.mark.parametrize("name", ("diff_drive", "kin_body", "fish"))
def test_delta_gamma_match_printed_assembly(name):
    # Gamma = h'(Om'+Om)h + h'S' + S h and
    # Delta = [h'(Om'+Om)h + 2 h'S'] v + (Dg h)' rho - S g + h' Dl'
    # with S[k] = rho' D_x h_k
    rng = np.random.default_rng(5)
    for _ in range(10):
        model, obj, cfg, x, rho, om, v = random_instance(name, rng)
        h = model.h(x)
        S = np.stack([rho @ Dk for Dk in model.dh(x)])
        Gp = h.T @ (om.T + om) @ h + h.T @ S.T + S @ h
        _, lx = running_cost(obj, x, 0.2, 1)
        Dp = (h.T @ (om.T + om) @ h + 2 * h.T @ S.T) @ v + (model.dg(x) @ h).T @ rho - S @ model.g(x) + h.T @ lx
        D, G = mih_control_derivatives(model, obj, rho, om, x, v, 0.2)
        scale = max(1.0, np.abs(Gp).max(), np.abs(Dp).max())
        assert np.max(np.abs(G - Gp)) < 1e-12 * scale
        assert np.max(np.abs(D - Dp)) < 1e-12 * scale


# -- action synthesis --------------------------------------------------------------


def test_second_order_zero_rhs():
    model, obj, cfg = setup("diff_drive")
    u = second_order_action(model, obj, np.zeros(3), np.zeros((3, 3)), np.asarray(obj.target), np.zeros(2), 0.0,
                            dataclasses.replace(cfg, saddle_tol=0.0))
    assert np.all(u == 0.0)


def test_second_order_reduces_to_first_order_direction():
    model, obj, cfg = setup("diff_drive")
    cfg = dataclasses.replace(cfg, lambda_nominal=1e-6)
    x = np.array([1.0, 2.0, 0.4])
    rho = np.array([30.0, -12.0, 400.0])
    om = np.eye(3)
    u = second_order_action(model, obj, rho, om, x, np.zeros(2), 0.0, cfg)
    ref = 1e-6 * np.linalg.solve(cfg.metric(obj), -model.h(x).T @ rho)
    assert np.allclose(u, ref, rtol=1e-6)


def test_second_order_descends_at_singular_state():
    model, obj, cfg = setup("diff_drive")
    obj = retarget(obj, [0.0, 1000.0, 0.0])
    plan = plan_horizon(model, obj, np.zeros(3), 0.0, cfg, SECOND_ORDER, search=False)
    k = int(np.argmin(plan.model_curve))
    assert abs(plan.mig_curve[0]) < 1e-8
    assert plan.model_curve[k] < 0
    assert abs(plan.controls[k][0] - plan.controls[k][1]) > 1e-3


def test_first_order_zero_costate():
    model, obj, cfg = setup("diff_drive", "first")
    u = first_order_action(model, np.zeros(3), np.ones(3), np.zeros(2), 0.0, cfg, 100.0, obj)
    assert np.all(u == 0.0)
    # the control metric penalizes u itself, so a nonzero default is pulled to zero
    u = first_order_action(model, np.zeros(3), np.ones(3), np.array([0.3, -0.1]), 0.0, cfg, 100.0, obj)
    assert np.all(u == 0.0)


@given(st.integers(0, 100_000))
def test_first_order_mig_nonpositive(seed):
    rng = np.random.default_rng(seed)
    model, obj, cfg = setup("diff_drive", "first")
    x = model.random_state(rng)
    rho = rng.normal(size=3) * 100
    v = model.random_control(rng)
    u = first_order_action(model, rho, x, v, 0.0, cfg, float(rng.uniform(0, 1e6)), obj)
    assert mig(model, rho, x, u, v) <= 1e-9 * max(1.0, np.abs(rho).max())


def test_first_order_head_on_equal_wheels():
    model, obj, cfg = setup("diff_drive", "first")
    obj = retarget(obj, [1000.0, 0.0, 0.0])
    act = feedback_step(model, obj, np.zeros(3), 0.0, cfg, FIRST_ORDER)
    assert act.u[0] == pytest.approx(act.u[1], abs=1e-9)
    assert act.u[0] > 0


@given(st.integers(0, 100_000))
def test_saturation_keeps_first_order_sign(seed):
    rng = np.random.default_rng(seed)
    model, obj, cfg = setup("diff_drive", "first")
    x = model.random_state(rng)
    rho = rng.normal(size=3) * 100
    v = np.zeros(2)
    u = first_order_action(model, rho, x, v, 0.0, cfg, float(rng.uniform(1, 1e7)), obj)
    before = mig(model, rho, x, u, v)
    if before < 0:
        assert mig(model, rho, x, saturate(u, model), v) < 0


def test_regularize_examples():
    assert np.allclose(regularize_hessian(np.diag([5.0, 3.0]), 0.1), np.diag([5.0, 3.0]))
    assert np.allclose(regularize_hessian(np.diag([-1.0, 2.0]), 0.1), np.diag([0.1, 2.0]))
    with pytest.raises(ValueError):
        regularize_hessian(np.eye(2), 0.0)


@given(hnp.arrays(np.float64, (4, 4), elements=st.floats(-10, 10)), st.floats(1e-3, 1.0))
def test_regularize_spectral(A, eps):
    H = A + A.T
    Hb = regularize_hessian(H, eps)
    assert np.linalg.eigvalsh(Hb).min() >= eps * (1 - 1e-9)
    assert np.max(np.abs(Hb @ H - H @ Hb)) < 1e-10 * max(1.0, np.abs(H).max()) ** 2


def test_saturate_examples():
    dd, _, _ = setup("diff_drive")
    fish, _, _ = setup("fish")
    assert np.array_equal(saturate(np.array([1.0, -2.0]), dd), [1.0, -2.0])
    assert saturate(np.array([0.0, -0.5, 0.0, 0.0]), fish)[1] == 0.0
    assert saturate(np.array([200.0, 0.0]), dd)[0] == 150.0 / 36.0


def test_scale_to_box_keeps_direction():
    dd, _, _ = setup("diff_drive")
    u = scale_to_box(np.array([10.0, 5.0]), np.zeros(2), dd)
    assert u[0] == pytest.approx(150 / 36) and u[1] == pytest.approx(75 / 36)


def test_select_tau_examples():
    t = np.linspace(0, 1, 11)
    assert select_tau(t, -t) == 1.0
    assert select_tau(t, (t - 0.3) ** 2) == pytest.approx(0.3)
    assert select_tau(t, np.cos(2 * np.pi * t)) == pytest.approx(0.5)
    assert select_tau(t, np.where((t == 0.2) | (t == 0.7), -1.0, 0.0)) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        select_tau(t, t[:-1])


@given(hnp.arrays(np.float64, (3, 3), elements=st.floats(-5, 5)), hnp.arrays(np.float64, 3, elements=st.floats(-20, 20)))
def test_box_quadratic_min_against_grid(A, g):
    H = A @ A.T + 0.5 * np.eye(3)
    lo, hi = np.array([-1.0, -2.0, 0.0]), np.array([1.0, 0.5, 3.0])
    u = box_quadratic_min(H, g, lo, hi)
    assert np.all(u >= lo - 1e-12) and np.all(u <= hi + 1e-12)
    q = lambda w: 0.5 * np.einsum("...i,ij,...j->...", w, H, w) - w @ g  # noqa: E731
    axes = [np.linspace(a, b, 31) for a, b in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    assert q(u) <= q(grid).min() + 1e-9
    # KKT: projected gradient vanishes
    grad = H @ u - g
    free = (u > lo + 1e-9) & (u < hi - 1e-9)
    assert np.all(np.abs(grad[free]) < 1e-8 * max(1.0, np.abs(g).max()))
    assert np.all(grad[np.isclose(u, lo)] >= -1e-8) and np.all(grad[np.isclose(u, hi)] <= 1e-8)


# -- line search and the feedback step -----------------------------------------------


def test_line_search_decreases_and_is_exact():
    model, obj, cfg = setup("diff_drive")
    obj = retarget(obj, [1000.0, 0.0, 0.0])
    default = rollout(model, obj, np.zeros(3), 0.0, cfg.horizon, cfg.dt)
    u = model.upper.copy()
    tr = default.traj
    adj = solve_adjoints(model, obj, tr)
    g1 = float(mig(model, adj.rho.values[0], tr.values[0], u, np.zeros(2)))
    lam, dJ = line_search_duration(model, obj, default, u, 0.0, cfg, g1)
    assert lam > 0 and dJ < 0
    assert dJ == pytest.approx(cost_of_duration(model, obj, np.zeros(3), 0.0, cfg, u, 0.0, lam) - default.cost)
    assert dJ <= cfg.c_armijo * lam * g1


def test_line_search_no_change_for_default_action():
    model, obj, cfg = setup("diff_drive")
    default = rollout(model, obj, np.array([100.0, 0.0, 0.0]), 0.0, cfg.horizon, cfg.dt)
    assert line_search_duration(model, obj, default, np.zeros(2), 0.1, cfg, 0.0) == (0.0, 0.0)


@given(st.integers(0, 100_000))
def test_line_search_accepts_descent_direction(seed):
    rng = np.random.default_rng(seed)
    model, obj, cfg = setup("diff_drive")
    x0 = model.random_state(rng)
    default = rollout(model, obj, x0, 0.0, cfg.horizon, cfg.dt)
    adj = solve_adjoints(model, obj, default.traj, second_order=False)
    rho = adj.rho.values[0]
    u = model.saturate(-1e3 * model.h(x0).T @ rho)
    g1 = float(mig(model, rho, x0, u, np.zeros(2)))
    if g1 < -1e-6 * default.cost:
        lam, dJ = line_search_duration(model, obj, default, u, 0.0, cfg, g1)
        assert lam > 0 and dJ < 0


def test_feedback_at_target():
    model, obj, cfg = setup("diff_drive")
    act = feedback_step(model, obj, np.zeros(3), 0.0, cfg, SECOND_ORDER)
    assert act.realized_dJ == 0.0 and (act.duration == 0.0 or np.linalg.norm(act.u) < 1e-9)


def test_lateral_target_turns_only_in_second_order():
    model, obj2, cfg2 = setup("diff_drive")
    _, obj1, cfg1 = setup("diff_drive", "first")
    obj1 = retarget(obj1, [0.0, 1000.0, 0.0])
    obj2 = retarget(obj2, [0.0, 1000.0, 0.0])
    a1 = feedback_step(model, obj1, np.zeros(3), 0.0, cfg1, FIRST_ORDER)
    a2 = feedback_step(model, obj2, np.zeros(3), 0.0, cfg2, SECOND_ORDER)
    assert a1.u[0] == pytest.approx(a1.u[1], abs=1e-9)
    assert abs(a2.u[0] - a2.u[1]) > 1e-2


@pytest.mark.parametrize("name", ("diff_drive", "kin_body", "fish"))
def test_accepted_actions_never_increase_cost(name):
    model, obj, cfg = setup(name)
    rng = np.random.default_rng(8)
    for _ in range(5):
        x0 = model.random_state(rng)
        act = feedback_step(model, obj, x0, 0.0, cfg, SECOND_ORDER)
        if act.accepted:
            J0 = rollout(model, obj, x0, 0.0, cfg.horizon, cfg.dt).cost
            J = cost_of_duration(model, obj, x0, 0.0, cfg, act.u, act.tau, act.duration)
            assert J - J0 == pytest.approx(act.realized_dJ, abs=1e-9 * J0)
            assert act.realized_dJ <= 0


def test_config_validation():
    with pytest.raises(ValueError):
        SynthesisConfig(horizon=0.5, gamma=1.0)
    with pytest.raises(ValueError):
        SynthesisConfig(horizon=0.5, saturation="wrap")
    with pytest.raises(ValueError):
        SynthesisConfig(horizon=-1.0)
