import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from needlevar.models import (
    ContractError,
    FishParams,
    build_model,
    check_derivatives,
    eval_dynamics,
    make_fish,
    quat_rotation,
)
from needlevar.ode import integrate

MODELS = ("diff_drive", "kin_body", "fish")


def test_diff_drive_hand_values():
    m = build_model("diff_drive", r=3.6, L=25.8)
    assert np.allclose(eval_dynamics(m, np.zeros(3), [1.0, 1.0]), [7.2, 0.0, 0.0])
    assert np.allclose(m.h(np.zeros(3))[:, 0], [3.6, 0.0, 3.6 / 25.8])
    assert np.allclose(m.h(np.array([0.0, 0.0, np.pi / 2]))[:, 0], [0.0, 3.6, 3.6 / 25.8])


@pytest.mark.parametrize("name", ("diff_drive", "kin_body"))
def test_kinematic_models_rest_at_zero_control(name):
    m = build_model(name)
    x = m.random_state(np.random.default_rng(0))
    assert np.all(eval_dynamics(m, x, np.zeros(m.control_dim)) == 0.0)


def test_kin_body_hand_values():
    m = build_model("kin_body")
    x = np.array([0, 0, 0, 1.0, 0, 0, 0])
    assert np.allclose(eval_dynamics(m, x, [1.0, 0, 0, 0])[:3], [1.0, 0, 0])
    # yaw is not actuated, so check the rate map directly: q' = G(q) w / 2
    from needlevar.models import quat_rate_matrix

    assert np.allclose(quat_rate_matrix(x[3:7]) @ np.array([0, 0, 1.0]), [0, 0, 0, 1.0])
    assert np.allclose(m.h(x)[3:7, 2:4].sum(axis=1), [0, 0.5, 0.5, 0])


@given(st.integers(0, 10_000))
def test_kin_body_rate_preserves_norm(seed):
    m = build_model("kin_body")
    rng = np.random.default_rng(seed)
    x = m.random_state(rng)
    dx = eval_dynamics(m, x, m.random_control(rng))
    assert abs(x[3:7] @ dx[3:7]) < 1e-12


def test_fish_hand_values():
    m = build_model("fish")
    x = np.zeros(13)
    x[3] = 1.0
    assert np.all(eval_dynamics(m, x, np.zeros(4)) == 0.0)
    x[7:10] = [1.0, 0.0, 0.0]
    x[10:13] = [0.0, 0.0, 1.0]
    assert np.allclose(eval_dynamics(m, x, np.zeros(4))[7:10], [0.0, -6.04 / 17.31, 0.0])
    y = np.zeros(13)
    y[3] = 1.0
    y[10:13] = [0.0, 2.0, 0.0]  # principal axis
    assert np.allclose(eval_dynamics(m, y, np.zeros(4))[10:13], 0.0)


def test_fish_drift():
    m = make_fish(FishParams(drift=(0.0, 10.0, 0.0)))
    x = np.zeros(13)
    x[3] = 1.0
    assert np.allclose(eval_dynamics(m, x, np.zeros(4))[:3], [0.0, 10.0, 0.0])


def test_saturation_bounds():
    fish = build_model("fish")
    assert fish.saturate(np.array([0.5, -0.5, 0.05, -0.05]))[1] == 0.0
    assert np.array_equal(fish.saturate(np.array([0.5, 0.5, 0.05, -0.05])), [0.5, 0.5, 0.05, -0.05])
    dd = build_model("diff_drive")
    assert np.allclose(dd.saturate(np.array([200.0, -200.0])), [150 / 36, -150 / 36])


@pytest.mark.parametrize("name", MODELS)
def test_check_derivatives_passes(name):
    rep = check_derivatives(build_model(name), trials=100, seed=1)
    assert rep.passed, rep.failures()


def test_check_derivatives_names_corrupted_entry():
    m = build_model("diff_drive")

    def bad(x):
        J = m.drift_jacobian(x).copy()
        J[1, 2] += 1.0
        return J

    rep = check_derivatives(dataclasses.replace(m, drift_jacobian=bad), trials=5)
    assert not rep.passed
    assert "drift_jacobian" in rep.failures()[0] and "(1, 2)" in rep.failures()[0]


@pytest.mark.parametrize("name", MODELS)
@given(seed=st.integers(0, 10_000), alpha=st.floats(-2, 2))
def test_control_affinity(name, seed, alpha):
    m = build_model(name)
    rng = np.random.default_rng(seed)
    x = m.random_state(rng)
    u1, u2 = m.random_control(rng), m.random_control(rng)
    lhs = eval_dynamics(m, x, alpha * u1 + (1 - alpha) * u2)
    rhs = alpha * eval_dynamics(m, x, u1) + (1 - alpha) * eval_dynamics(m, x, u2)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("name", ("kin_body", "fish"))
def test_quaternion_norm_drift(name):
    m = build_model(name)
    rng = np.random.default_rng(3)
    x0 = m.random_state(rng)
    u = m.random_control(rng)
    tr = integrate(lambda t, x: m.f(x, u), x0, 0.0, 1.0, 1e-3)
    s = m.quat_start
    assert np.max(np.abs(np.linalg.norm(tr.values[:, s : s + 4], axis=1) - 1.0)) < 1e-7


def _coast(x0):
    m = build_model("fish")
    return integrate(lambda t, x: m.f(x, np.zeros(4)), x0, 0.0, 1.0, 1e-3, m.post_step).values


def test_fish_coasting_invariants():
    # with M v' = M v x w the momentum norm |M v| and the rotational energy are conserved
    x0 = np.zeros(13)
    x0[3] = 1.0
    x0[7:13] = [3.0, -1.0, 0.5, 0.2, -0.1, 0.3]
    X = _coast(x0)
    Md = np.array([6.04, 17.31, 8.39])
    Jd = np.array([1.57, 27.78, 54.11])
    p = np.linalg.norm(Md * X[:, 7:10], axis=1)
    Er = 0.5 * np.sum(Jd * X[:, 10:13] ** 2, 1)
    assert np.max(np.abs(p - p[0])) / p[0] < 1e-4
    assert np.max(np.abs(Er - Er[0])) / Er[0] < 1e-4


def test_fish_translational_energy_not_conserved():
    # no v x (M v) term in the angular equation, so 0.5 v'Mv exchanges with nothing
    x0 = np.zeros(13)
    x0[3] = 1.0
    x0[7:13] = [3.0, -1.0, 0.5, 0.2, -0.1, 0.3]
    X = _coast(x0)
    Md = np.array([6.04, 17.31, 8.39])
    Jd = np.array([1.57, 27.78, 54.11])
    E = 0.5 * (np.sum(Md * X[:, 7:10] ** 2, 1) + np.sum(Jd * X[:, 10:13] ** 2, 1))
    assert np.max(np.abs(E - E[0])) / E[0] > 1e-2


def test_rotation_is_orthonormal():
    q = np.array([0.3, -0.2, 0.5, 0.7])
    q /= np.linalg.norm(q)
    R = quat_rotation(q)
    assert np.allclose(R @ R.T, np.eye(3)) and np.isclose(np.linalg.det(R), 1.0)


def test_contract_errors():
    with pytest.raises(ContractError):
        build_model("boat")
    with pytest.raises(ContractError):
        build_model("diff_drive", r=-1.0)
    m = build_model("diff_drive")
    with pytest.raises(ContractError):
        m.f(np.zeros(4), np.zeros(2))
