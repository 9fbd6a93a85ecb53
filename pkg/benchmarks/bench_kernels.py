#!/usr/bin/env python3
"""Numba kernels vs their pure-numpy fallbacks.

Times the two hot loops directly (both implementations in one process) and,
with ``--end-to-end``, a full loss density and a Monte-Carlo run in child
processes with and without ``FLUCTCREDIT_DISABLE_NUMBA``.

    python benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from fluctcredit import kernels
from fluctcredit.loss import default_grid

END_TO_END = """
import time
from fluctcredit.ensemble import CorrelationModel
from fluctcredit.loss import PortfolioSpec, avg_loss_density, default_grid
from fluctcredit.montecarlo import SimConfig, run_simulation
p = PortfolioSpec.homogeneous(100, 75.0, 100.0, 0.17, 0.35, 1.0)
avg_loss_density(default_grid(201), p, CorrelationModel(100, 0.28, 6.0))  # warm-up / compile
t = time.perf_counter()
avg_loss_density(default_grid(), p, CorrelationModel(100, 0.28, 6.0))
t_density = time.perf_counter() - t
t = time.perf_counter()
run_simulation(SimConfig(p, CorrelationModel(100, 0.28), N=6, realizations=100_000, seed=1))
print(t_density, time.perf_counter() - t)
"""


def best_of(fn, repeat):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_cells(repeat):
    rng = np.random.default_rng(0)
    n = 64 * 512
    w = rng.dirichlet(np.ones(n))
    m = rng.uniform(0.0, 0.6, n)
    s = rng.uniform(1e-3, 2e-2, n)
    edges = np.linspace(-2.5e-4, 1.0 + 2.5e-4, 2001)
    t_nb = best_of(lambda: kernels._cells_numba(w, m, s, edges), repeat)
    t_np = best_of(lambda: kernels._cells_numpy(w, m, s, edges), repeat)
    a, b = kernels._cells_numba(w, m, s, edges)[0], kernels._cells_numpy(w, m, s, edges)[0]
    return "gaussian_cell_masses", f"{n} comps x {edges.size} edges", t_nb, t_np, float(np.max(np.abs(a - b)))


def bench_losses(repeat):
    rng = np.random.default_rng(1)
    n, K = 20_000, 500
    x = rng.standard_normal((n, K))
    scale = np.full(K, 0.25)
    offset = np.full(K, np.log(1 / 0.75) + 0.12)
    f = np.full(K, 1.0 / K)
    t_nb = best_of(lambda: kernels._losses_numba(x, scale, offset, f), repeat)
    t_np = best_of(lambda: kernels._losses_numpy(x, scale, offset, f), repeat)
    a, b = kernels._losses_numba(x, scale, offset, f), kernels._losses_numpy(x, scale, offset, f)
    return "merton_losses", f"{n} draws x K={K}", t_nb, t_np, float(np.max(np.abs(a - b)))


def end_to_end():
    rows = {}
    for label, disable in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, FLUCTCREDIT_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True, check=True)
        rows[label] = [float(v) for v in out.stdout.split()]
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()

    print(f"{'kernel':<22} {'size':<26} {'numba s':>9} {'numpy s':>9} {'speed-up':>9} {'max |diff|':>11}")
    for name, size, t_nb, t_np, diff in (bench_cells(args.repeat), bench_losses(args.repeat)):
        print(f"{name:<22} {size:<26} {t_nb:>9.4f} {t_np:>9.4f} {t_np / t_nb:>8.1f}x {diff:>11.2e}")

    if args.end_to_end:
        rows = end_to_end()
        print()
        print(f"{'end to end':<22} {'numba s':>9} {'numpy s':>9}")
        print(f"{'loss density (2000 pts)':<22} {rows['numba'][0]:>9.3f} {rows['numpy'][0]:>9.3f}")
        print(f"{'simulation (1e5 draws)':<22} {rows['numba'][1]:>9.3f} {rows['numpy'][1]:>9.3f}")


if __name__ == "__main__":
    main()
