import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from needlevar.analysis import (
    bracket_set,
    bracket_span_rank,
    descent_map,
    flow_commutator,
    grid_states,
    lie_bracket,
    numeric_jacobian,
    proposition_diagnostics,
    with_lambda,
)
from needlevar.models import SystemModel, build_model
from needlevar.objective import Objective
from oracles import setup


def test_constant_fields_commute():
    f = lambda x: np.array([1.0, 2.0])  # noqa: E731
    g = lambda x: np.array([-3.0, 0.5])  # noqa: E731
    assert np.allclose(lie_bracket(f, g, np.zeros(2)), 0.0)


def _field(a):
    return lambda x: np.array([np.sin(a * x[1]), x[0] * x[1], np.cos(x[0]) + a])


@given(st.floats(-2, 2), st.floats(-2, 2), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_bracket_antisymmetric_and_bilinear(a, b, x):
    f, g = _field(a), _field(b + 0.3)
    x = np.array(x)
    Jf, Jg = numeric_jacobian(f, x), numeric_jacobian(g, x)
    fg = lie_bracket(f, g, x, Jf, Jg)
    gf = lie_bracket(g, f, x, Jg, Jf)
    assert np.allclose(fg, -gf, atol=1e-10)
    alpha = 2.5
    sf = lambda y: alpha * f(y)  # noqa: E731
    assert np.allclose(lie_bracket(sf, g, x, alpha * Jf, Jg), alpha * fg, atol=1e-10)


def test_diff_drive_bracket_against_commutator():
    m = build_model("diff_drive")
    r, L = 36.0, 258.0
    for th in (0.0, 0.3, 2.0):
        x = np.array([10.0, -5.0, th])
        b = bracket_set(m, x).bracket(0, 1)
        assert np.allclose(b, 2 * r * r / L * np.array([-np.sin(th), np.cos(th), 0.0]))
        h1 = lambda y: m.h(y)[:, 0]  # noqa: E731
        h2 = lambda y: m.h(y)[:, 1]  # noqa: E731
        errs = [np.linalg.norm(flow_commutator(h1, h2, x, e) - b) for e in (1e-2, 5e-3, 2.5e-3)]
        # first order in eps: halving roughly halves the error
        assert errs[0] / errs[1] > 1.6 and errs[1] / errs[2] > 1.6


def test_analytic_brackets_match_numeric():
    for name in ("diff_drive", "kin_body", "fish"):
        m = build_model(name)
        x = m.random_state(np.random.default_rng(1))
        bs = bracket_set(m, x)
        cols = [lambda y, k=k: m.h(y)[:, k] for k in range(m.control_dim)]
        for (i, j), b in bs.pair_brackets.items():
            ref = lie_bracket(cols[i], cols[j], x)
            assert np.allclose(b, ref, atol=1e-5 * max(1.0, np.abs(ref).max()))
        ref = lie_bracket(m.g, cols[0], x)
        assert np.allclose(bs.drift_brackets[:, 0], ref, atol=1e-5 * max(1.0, np.abs(ref).max()))


def test_span_ranks():
    dd = build_model("diff_drive")
    assert [bracket_span_rank(dd, np.array([0.0, 0.0, th]))[0] for th in np.linspace(0, 2 * np.pi, 16, endpoint=False)] == [3] * 16
    kb = build_model("kin_body")
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = rng.normal(size=4)
        x = np.r_[rng.normal(size=3), q / np.linalg.norm(q)]
        assert bracket_span_rank(kb, x)[0] == 6


def test_fully_actuated_toy():
    N = 4
    toy = SystemModel(
        name="toy", state_dim=N, control_dim=N, drift=lambda x: np.zeros(N), control_matrix=lambda x: np.eye(N),
        drift_jacobian=lambda x: np.zeros((N, N)), control_jacobians=lambda x: np.zeros((N, N, N)),
        hessians=lambda x, u: np.zeros((N, N, N)), lower=-np.ones(N), upper=np.ones(N),
    )
    rank, bs = bracket_span_rank(toy, np.zeros(N))
    assert rank == N and np.all(bs.matrix()[:, N:] == 0)


def _dd_maps(target, obstacles=(), lam=1e-3):
    model, o2, c2 = setup("diff_drive")
    _, o1, c1 = setup("diff_drive", "first")
    o2 = Objective(o2.Q, o2.P1, np.asarray(target, float), o2.R, o2.position_rows, obstacles)
    o1 = Objective(o1.Q, o1.P1, np.asarray(target, float), o1.R, o1.position_rows, obstacles)
    return model, o2, o1, with_lambda(c2, lam), with_lambda(c1, lam)


def test_descent_map_target_cell_and_grid():
    model, o2, o1, c2, c1 = _dd_maps([400.0, 1000.0, 0.0])
    mesh, states = grid_states([0.0, 0.0, 0.0], (0, 1), [(200.0, 600.0), (800.0, 1200.0)], 100.0)
    dm = descent_map(model, o2, o1, states, (0, 1), c2, c1)
    assert len(dm) == 25
    at = np.all(dm.coords == [400.0, 1000.0], axis=1)
    assert abs(dm.predicted_dJ[at][0]) < 1e-12
    off = ~at
    assert np.all(dm.predicted_dJ[off] < 0)
    # singular set: first order vanishes on the vertical line, second order does not
    line = np.isclose(dm.coords[:, 0], 400.0) & off
    assert np.all(np.abs(dm.mig_first_order[line]) < 1e-9)
    first_singular = np.sum(np.abs(dm.mig_first_order[off]) < 1e-9)
    second_singular = np.sum(dm.predicted_dJ[off] >= -1e-12)
    assert first_singular > second_singular == 0


def test_descent_map_parallel_matches_serial(tmp_path):
    model, o2, o1, c2, c1 = _dd_maps([400.0, 1000.0, 0.0])
    _, states = grid_states([0.0, 0.0, 0.0], (0, 1), [(0.0, 300.0), (0.0, 300.0)], 100.0)
    a = descent_map(model, o2, o1, states, (0, 1), c2, c1)
    b = descent_map(model, o2, o1, states, (0, 1), c2, c1, workers=2)
    assert np.array_equal(a.predicted_dJ, b.predicted_dJ) and np.array_equal(a.mig_first_order, b.mig_first_order)
    a.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "x0,x1,predicted_dJ_second_order,mig_first_order"
    assert len(lines) == 17
    assert all("e" in field for field in lines[1].split(","))


def test_grid_states_validation():
    with pytest.raises(ValueError):
        grid_states([0, 0], (0,), [(0, 1), (0, 1)], 0.5)
    with pytest.raises(ValueError):
        grid_states([0, 0], (0,), [(0, 1)], 0.0)


def test_proposition_diagnostics():
    model, o2, _, c2, _ = _dd_maps([0.0, 1000.0, 0.0])
    rep = proposition_diagnostics(model, o2, np.zeros(3), c2)
    assert np.max(np.abs(rep.rho_h)) < 1e-8
    assert abs(rep.rho_pair_brackets[(0, 1)]) > 1e-3
    assert rep.min_mih < 0
    rep2 = proposition_diagnostics(model, o2, np.array([-300.0, 0.0, 0.5]), c2)
    assert rep2.max_abs_mig > 0


def test_proposition_diagnostics_zero_weights():
    model = build_model("diff_drive")
    _, _, cfg = setup("diff_drive")
    obj = Objective(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros(3), 0.1 * np.eye(2))
    rep = proposition_diagnostics(model, obj, np.array([100.0, 50.0, 0.2]), dataclasses.replace(cfg, saddle_tol=0.0))
    assert rep.max_abs_mig == 0.0 and np.all(rep.rho_h == 0) and rep.rho_pair_brackets[(0, 1)] == 0.0
    assert np.all(rep.rho_drift_brackets == 0) and rep.min_mih == 0.0
