"""Time each hot kernel, and one full backward solve, with numba on and off.

    python benchmarks/bench_kernels.py [--paths N] [--steps n] [--repeat k] [--json out.json]

The numpy fallback is selected through DRBSDE_DISABLE_NUMBA, exactly as a
user would. The first numba call of each kernel is a warm-up (JIT or cache
load) and is excluded from the timings.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import time

import numpy as np

from drbsde import _accel, kernels
from drbsde.bsde import TerminalSpec, monomial_exponents, solve_bsde
from drbsde.generators import constant_coefficients, hamiltonian
from drbsde.paths import make_grid, simulate_brownian


def _time(fn, repeat):
    fn()  # warm-up
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def cases(n_paths, n_steps):
    rng = np.random.default_rng(0)
    ens = simulate_brownian(make_grid(1.0, n_steps), 1, n_paths, seed=1)
    beta = rng.normal(size=(n_paths, n_steps, 1)) * 0.3
    a = rng.normal(size=(n_paths, n_steps)) * 0.1
    c = rng.random((n_paths, n_steps))
    stop = rng.integers(0, n_steps + 1, n_paths)
    C = rng.normal(size=(n_paths, 8))
    T = rng.normal(size=(n_paths, 2))
    gap = rng.random((n_paths, n_steps + 1)) - 0.05
    tol = np.full(n_steps + 1, 0.01)
    state = rng.normal(size=(n_paths, 2))
    expo = monomial_exponents(2, 3)
    tree = rng.normal(size=(2001, 2001))
    xi = TerminalSpec(lambda e: e.values[:, -1, 0])
    f = hamiltonian(constant_coefficients(lam=0.5))
    return {
        "log_stoch_exp": lambda: kernels.log_stoch_exp(beta, ens.increments, ens.dt, 0, n_steps),
        "weighted_sum": lambda: kernels.weighted_sum(a, beta, c, ens.increments, ens.dt, stop),
        "gram": lambda: kernels.gram(C, T),
        "first_hit": lambda: kernels.first_hit(gap, tol),
        "poly_features": lambda: kernels.poly_features(state, expo),
        "stopping_tree(2000)": lambda: kernels.stopping_tree(tree),
        "solve_bsde": lambda: solve_bsde(f, xi, ens),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--paths", type=int, default=2**16)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", default=None)
    args = p.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rows = []
    for name, fn in cases(args.paths, args.steps).items():
        os.environ.pop(_accel.DISABLE_ENV, None)
        t_nb = _time(fn, args.repeat)
        os.environ[_accel.DISABLE_ENV] = "1"
        t_np = _time(fn, args.repeat)
        os.environ.pop(_accel.DISABLE_ENV, None)
        rows.append({"kernel": name, "numba_s": t_nb, "numpy_s": t_np, "speedup": t_np / t_nb})

    print(f"{args.paths} paths x {args.steps} steps, median of {args.repeat}")
    print(f"{'kernel':<22}{'numba [s]':>12}{'numpy [s]':>12}{'numpy/numba':>13}")
    for r in rows:
        print(f"{r['kernel']:<22}{r['numba_s']:>12.4f}{r['numpy_s']:>12.4f}{r['speedup']:>13.2f}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"n_paths": args.paths, "n_steps": args.steps, "rows": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
