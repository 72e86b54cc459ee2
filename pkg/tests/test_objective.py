import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from needlevar.objective import (
    ObstaclePenalty,
    Objective,
    running_cost,
    target_tracking_trajectory,
    terminal_cost,
    total_cost,
)
from needlevar.ode import Trajectory


def quad(Q=(10.0, 10.0, 1000.0), target=(0.0, 0.0, 0.0), obstacles=()):
    n = len(Q)
    return Objective(np.diag(Q), np.zeros((n, n)), np.asarray(target), np.eye(2), (0, 1), tuple(obstacles))


def obstacle(center=(300.0, 300.0), radius=150.0, weight=1e4, k=0.05, **kw):
    return ObstaclePenalty(center, radius, weight, k, **kw)


def test_at_target():
    v, g, H = running_cost(quad(), np.zeros(3), 0.0)
    assert v == 0.0 and np.all(g == 0.0) and np.array_equal(H, np.diag([10.0, 10.0, 1000.0]))


def test_quadratic_value():
    assert running_cost(quad(), np.array([1.0, 0.0, 0.0]), 0.0, order=0) == 5.0


def test_penalty_value_at_surface_and_monotone():
    obj = quad(Q=(0, 0, 0), obstacles=[obstacle()])
    d = np.linspace(150.0, 600.0, 50)
    xs = np.stack([300.0 + d, np.full_like(d, 300.0), np.zeros_like(d)], 1)
    vals = running_cost(obj, xs, 0.0, order=0)
    assert vals[0] == pytest.approx(1e4, rel=1e-10)
    assert np.all(np.diff(vals) < 0)


def test_terminal():
    P1 = np.diag([100.0, 200.0, 100.0, 0, 0, 0, 0])
    obj = Objective(np.zeros((7, 7)), P1, np.zeros(7), np.eye(4), (0, 1, 2))
    v, g, H = terminal_cost(obj, np.zeros(7), 1.0)
    assert v == 0.0 and np.all(g == 0.0) and np.array_equal(H, P1)
    x = np.array([1.0, -2.0, 0.5, 0.3, 0.1, 0.2, 0.4])
    h = 1e-6
    fd = np.array([(terminal_cost(obj, x + h * e, 1.0)[0] - terminal_cost(obj, x - h * e, 1.0)[0]) / (2 * h) for e in np.eye(7)])
    assert np.max(np.abs(fd - terminal_cost(obj, x, 1.0)[1])) < 1e-6


def test_total_cost_constant_error():
    obj = quad()
    t = np.linspace(0.0, 0.5, 501)
    e = np.array([3.0, -2.0, 0.1])
    tr = Trajectory(t, np.tile(e, (len(t), 1)))
    assert total_cost(obj, tr) == pytest.approx(0.5 * 0.5 * e @ np.diag([10.0, 10.0, 1000.0]) @ e, abs=1e-8)
    assert total_cost(obj, Trajectory(t, np.zeros((len(t), 3)))) == 0.0


def test_far_obstacle_negligible():
    t = np.linspace(0.0, 0.5, 101)
    tr = Trajectory(t, np.stack([t * 100, t * 50, 0 * t], 1))
    obj = quad()
    # more than 10/k past the surface of the nearest path point
    far = obj.with_obstacles([obstacle(center=(100.0, 1000.0), radius=150.0, weight=1.0, k=0.05)])
    assert abs(total_cost(far, tr) - total_cost(obj, tr)) < 1e-6


def test_tracking_reference():
    assert np.allclose(target_tracking_trajectory(0.0)[:3], [30.0, 0.0, 0.0])
    r = np.linalg.norm(target_tracking_trajectory(5 * np.pi)[:2])
    assert r == pytest.approx(10.0)
    t = np.linspace(0, 200, 20001)
    p = target_tracking_trajectory(t)
    rr = np.linalg.norm(p[:, :2], axis=1)
    assert rr.min() >= 10 - 1e-9 and rr.max() <= 30 + 1e-9 and np.abs(p[:, 2]).max() <= 10 + 1e-9


def _fd_check(obj, x, t):
    v, g, H = running_cost(obj, x, t)
    n = len(x)
    G = np.empty(n)
    HH = np.empty((n, n))
    for j in range(n):
        h = 1e-5 * max(1.0, abs(x[j]))
        e = np.zeros(n)
        e[j] = h
        G[j] = (running_cost(obj, x + e, t, 0) - running_cost(obj, x - e, t, 0)) / (2 * h)
        HH[:, j] = (running_cost(obj, x + e, t, 1)[1] - running_cost(obj, x - e, t, 1)[1]) / (2 * h)
    rel = lambda a, b: np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))  # noqa: E731
    return rel(g, G), rel(H, HH)


@pytest.mark.parametrize("with_obstacles", (False, True))
def test_derivatives_random_states(with_obstacles):
    obs = [obstacle(), obstacle(center=(-200.0, 100.0), radius=80.0, velocity=(5.0, 0.0), amplitude=(0.0, 30.0),
                                frequency=(0.0, 1.0), phase=(0.0, 0.3))]
    obj = quad(obstacles=obs if with_obstacles else ())
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        x = np.r_[rng.uniform(-600, 600, 2), rng.uniform(-3, 3)]
        worst = max(worst, *_fd_check(obj, x, rng.uniform(0, 5)))
    assert worst < 1e-5


def test_penalty_smooth_across_surface():
    obj = quad(Q=(0, 0, 0), obstacles=[obstacle(weight=1.0)])
    secs = []
    for h in (1e-2, 5e-3, 2.5e-3):
        d = np.array([150.0 - h, 150.0, 150.0 + h])
        xs = np.stack([300.0 + d, np.full(3, 300.0), np.zeros(3)], 1)
        v = running_cost(obj, xs, 0.0, 0)
        secs.append((v[0] - 2 * v[1] + v[2]) / h**2)
    assert max(secs) - min(secs) < 1e-4


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.floats(0, 10))
def test_nonnegative(x, t):
    obj = quad(obstacles=[obstacle()])
    assert running_cost(obj, np.array(x), t, 0) >= 0.0


def test_validation():
    with pytest.raises(ValueError):
        Objective(np.eye(2), np.eye(2), np.zeros(2), -np.eye(1))
    with pytest.raises(ValueError):
        Objective(np.eye(2), np.eye(3), np.zeros(2), np.eye(1))
    with pytest.raises(ValueError):
        ObstaclePenalty((0, 0), 1.0, -1.0, 1.0)
