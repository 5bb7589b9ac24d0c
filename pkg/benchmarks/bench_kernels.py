"""Time the numba and numpy kernel backends on solver-sized inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Both backends are importable side by side, so one process times both. The
first numba call (compilation) is excluded.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from mddr import kernels
from mddr.sliced import sample_projections


def affine_jacobians(Ys, in_dim, rng):
    d = Ys[0].shape[1]
    jacs, off = [], 0
    for Y in Ys:
        F = rng.normal(size=(Y.shape[0], in_dim))
        vals = np.zeros((Y.shape[0], d, d * in_dim + d))
        for r in range(d):
            vals[:, r, r * in_dim : (r + 1) * in_dim] = F
            vals[:, r, d * in_dim + r] = 1.0
        jacs.append((off, vals, F))
        off += vals.shape[2]
    return jacs, off


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    cases = [
        ("sliced terms, 50x50 atoms, L=100", 50, (50,), 100, False),
        ("barycenter step, K=3, 50 atoms, L=100", 50, (50, 50, 50), 100, False),
        ("barycenter step + phi Jacobian, K=3", 50, (50, 50, 50), 100, True),
        ("barycenter step, K=3, 400 atoms, L=100", 400, (400, 400, 400), 100, False),
    ]
    print(f"{'case':45s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, M, sizes, L, with_jac in cases:
        theta = sample_projections(L, 2, seed=1).directions
        Z = rng.normal(size=(M, 2))
        Ys = [rng.normal(size=(n, 2)) for n in sizes]
        pi = np.full(len(Ys), 1.0 / len(Ys))
        if len(Ys) == 1:
            def run_np():
                kernels.sliced_terms_numpy(theta, Z, Ys[0], 2.0, True, True, None)

            def run_nb():
                kernels.sliced_terms_numba(theta, Z, Ys[0], 2.0, True, True, None)
        else:
            jacs, n_phi = affine_jacobians(Ys, 1, rng) if with_jac else (None, 0)

            def run_np():
                kernels.barycenter_terms_numpy(theta, Z, Ys, pi, 2.0, True, True, jacs, n_phi)

            def run_nb():
                kernels.barycenter_terms_numba(theta, Z, Ys, pi, 2.0, True, True, jacs, n_phi)
        t_np = best_of(run_np, args.repeat)
        if kernels.HAVE_NUMBA:
            run_nb()
            t_nb = best_of(run_nb, args.repeat)
            print(f"{name:45s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.2f}")
        else:
            print(f"{name:45s} {1e3 * t_np:10.3f} {'n/a':>10s} {'n/a':>8s}")


if __name__ == "__main__":
    main()
