import os
import subprocess
import sys

import numpy as np
import pytest
from fractions import Fraction

from mddr import kernels
from mddr.sliced import sample_projections

needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")


def test_rank_plan_matches_rational_merge():
    for m, n in [(1, 1), (2, 3), (4, 6), (5, 7)]:
        src, tgt, mass = kernels.rank_plan(m, n)
        # reference: walk the merged breakpoints with exact fractions
        cuts = sorted({Fraction(i, m) for i in range(m + 1)} | {Fraction(j, n) for j in range(n + 1)})
        ref = [(int(a * m), int(a * n), b - a) for a, b in zip(cuts[:-1], cuts[1:])]
        ref = [(min(i, m - 1), min(j, n - 1), float(w)) for i, j, w in ref]
        assert list(zip(src.tolist(), tgt.tolist(), mass.tolist())) == ref


def test_rank_plan_read_only_and_rejects():
    src, _, _ = kernels.rank_plan(3, 4)
    with pytest.raises(ValueError):
        src[0] = 1
    with pytest.raises(ValueError):
        kernels.rank_plan(0, 2)


def test_backend_env_rejects_unknown():
    env = {**os.environ, "MDDR_BACKEND": "fortran"}
    out = subprocess.run([sys.executable, "-c", "import mddr.kernels"], env=env, capture_output=True, text=True)
    assert out.returncode != 0 and "MDDR_BACKEND" in out.stderr


def random_case(rng, M=6, sizes=(5, 7, 6), d=2, L=9):
    theta = sample_projections(L, d, seed=int(rng.integers(1 << 30))).directions
    Z = rng.normal(size=(M, d))
    Ys = [rng.normal(size=(n, d)) for n in sizes]
    pi = rng.dirichlet(np.ones(len(sizes)))
    return theta, Z, Ys, pi


@needs_numba
@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_sliced_terms_backends_agree(rng, p):
    theta, Z, Ys, _ = random_case(rng)
    JY = rng.normal(size=(Ys[0].shape[0], 2, 4))
    a = kernels.sliced_terms_numpy(theta, Z, Ys[0], p, True, True, JY)
    b = kernels.sliced_terms_numba(theta, Z, Ys[0], p, True, True, JY)
    for x, y in zip(a, b):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-14)


@needs_numba
def test_w1d_backends_agree(rng):
    for _ in range(20):
        xs, ys = np.sort(rng.normal(size=4)), np.sort(rng.normal(size=7))
        assert kernels.w1d_sorted_numba(xs, ys, 2.5) == pytest.approx(kernels.w1d_sorted_numpy(xs, ys, 2.5), rel=1e-13)


@needs_numba
@pytest.mark.parametrize("affine", [False, True])
def test_barycenter_terms_backends_agree(rng, affine):
    theta, Z, Ys, pi = random_case(rng)
    d = 2
    jacs, off = [], 0
    for Y in Ys:
        if affine:
            F = rng.normal(size=(Y.shape[0], 3))
            vals = np.zeros((Y.shape[0], d, d * 4))
            for r in range(d):
                vals[:, r, r * 3 : r * 3 + 3] = F
                vals[:, r, d * 3 + r] = 1.0
            jacs.append((off, vals, F))
        else:
            vals = rng.normal(size=(Y.shape[0], d, 5))
            jacs.append((off, vals, None))
        off += vals.shape[2]
    a = kernels.barycenter_terms_numpy(theta, Z, Ys, pi, 2.0, True, True, jacs, off)
    b = kernels.barycenter_terms_numba(theta, Z, Ys, pi, 2.0, True, True, jacs, off)
    for x, y in zip(a, b):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-13)


def test_barycenter_h_is_weighted_gradient(rng):
    theta, Z, Ys, pi = random_case(rng)
    h, _, direct, _ = kernels.barycenter_terms(theta, Z, Ys, pi, 2.0, want_direct=True)
    assert np.allclose(h, np.einsum("mdk,k->md", direct, pi), atol=1e-14)
