"""Throughput comparison of the jitted and pure-numpy simulation kernels.

Run: python benchmarks/bench_kernels.py [--seconds 2.0]

Times single RHS evaluations and full RK4 integration spans on the bundled
two-area case under both backends (OSCDAMP_BACKEND is overridden in-process).
"""

import argparse
import os
import time

import numpy as np

import oscdamp
from oscdamp import kernels
from oscdamp.case import parse_case
from oscdamp.powerflow import solve_power_flow, build_ybus, kron_reduce
from oscdamp.dynamics import initialize_from_power_flow


def timed(fn, seconds):
    fn()                       # warm (and JIT-compile on the numba path)
    n = 0
    t0 = time.perf_counter()
    while time.perf_counter() - t0 < seconds:
        fn()
        n += 1
    return (time.perf_counter() - t0) / n


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seconds", type=float, default=2.0,
                    help="wall time per measurement")
    args = ap.parse_args()

    case = parse_case(oscdamp.bundled_case_text())
    sol = solve_power_flow(case)
    red = kron_reduce(build_ybus(case), case, sol)
    eq = initialize_from_power_flow(case, sol, red)
    m = eq.model
    rng = np.random.default_rng(0)
    y = eq.state + 0.02 * rng.standard_normal(m.n_states)
    margs = (m.pf, m.pi, m.gains, m.xref, m.active, m.gmat, m.bmat, m.omega0)

    results = {}
    for backend in ("numpy", "numba"):
        os.environ[kernels.ENV_VAR] = backend
        t_rhs = timed(lambda: kernels.rhs(y, *margs), args.seconds)
        t_span = timed(lambda: kernels.rk4_span(y.copy(), 0.005, 200, *margs),
                       args.seconds)
        results[backend] = (t_rhs, t_span)
        print(f"{backend:>6}: rhs {1e6 * t_rhs:8.2f} us/call   "
              f"rk4 span(200 steps) {1e3 * t_span:8.3f} ms "
              f"({1e6 * t_span / 200:7.2f} us/step)")
    os.environ.pop(kernels.ENV_VAR, None)

    s_rhs = results["numpy"][0] / results["numba"][0]
    s_span = results["numpy"][1] / results["numba"][1]
    print(f"speedup numba vs numpy: rhs {s_rhs:.1f}x, rk4 span {s_span:.1f}x")


if __name__ == "__main__":
    main()
