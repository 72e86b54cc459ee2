"""Compiled vs pure-Python kernels.

Times the three hot loops (forward rollout with running cost, the costate
sweep and the second-order costate sweep) and one short closed-loop trial per
model, first with the compiled extension and then with the fallback, and
checks that both give the same numbers.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from needlevar import _pycore, adjoint, needle
from needlevar.harness.closed_loop import simulate_feedback
from needlevar.harness.scenario import preset
from needlevar.kernels import COMPILED

try:
    from needlevar import _core
except ImportError:  # pragma: no cover
    _core = None


def use(backend) -> None:
    needle.backend = backend
    adjoint.backend = backend


def best_of(fn, repeat: int) -> tuple:
    out, best = None, float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def cases():
    for name in ("diff_drive_mc", "kin_body_mc", "fish_mc"):
        sc = preset(name)
        model = sc.build_model()
        obj = sc.build_objective("second", model)
        cfg = sc.synthesis_config("second")
        x0 = sc.sample_initial(np.random.default_rng(1), model, obj)
        yield name, sc, model, obj, cfg, x0


def workloads(sc, model, obj, cfg, x0):
    v = np.zeros(model.control_dim)
    u = 0.5 * model.upper
    traj = needle.rollout(model, obj, x0, 0.0, cfg.horizon, cfg.dt, v, u, (0.1, 0.2)).traj

    def roll():
        return needle.rollout(model, obj, x0, 0.0, cfg.horizon, cfg.dt, v, u, (0.1, 0.2)).traj.values

    def adj():
        a = adjoint.solve_adjoints(model, obj, traj, v, second_order=True)
        return np.concatenate([a.rho.values.ravel(), a.omega.values.ravel()])

    def loop():
        rate = sc.settings("second")["rate_hz"]
        return simulate_feedback(model, obj, cfg, x0, "second", rate, 2.0).states

    return {"rollout": roll, "adjoints": adj, "closed loop 2 s": loop}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _core is None:
        print("compiled extension not built; only the fallback is available")
    print(f"{'case':<16}{'workload':<18}{'compiled s':>12}{'python s':>12}{'speedup':>10}{'max diff':>12}")
    for name, sc, model, obj, cfg, x0 in cases():
        for label, fn in workloads(sc, model, obj, cfg, x0).items():
            rep = 1 if label.startswith("closed") else args.repeat
            tc, oc = (float("nan"), None)
            if _core is not None:
                use(_core)
                tc, oc = best_of(fn, rep)
            use(_pycore)
            tp, op = best_of(fn, rep)
            diff = float(np.nanmax(np.abs(oc - op))) if oc is not None and oc.shape == op.shape else float("nan")
            print(f"{name:<16}{label:<18}{tc:>12.4f}{tp:>12.4f}{tp / tc:>10.1f}{diff:>12.2e}")
    use(_core if COMPILED else _pycore)


if __name__ == "__main__":
    main()
