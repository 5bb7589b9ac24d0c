"""Hot loops of the package, in two interchangeable backends.

``numba``  compiled two-pointer sweeps over the north-west-corner plan.
``numpy``  vectorised over projections using the rank-space plan, which for
           uniform weights depends only on the two atom counts.

The backend is chosen once at import time from the ``MDDR_BACKEND``
environment variable (``numba`` or ``numpy``); the default is ``numba`` when
it can be imported. Both implementations are always importable under their
suffixed names so they can be compared directly.
"""

from __future__ import annotations

import functools
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


def _requested_backend() -> str:
    name = os.environ.get("MDDR_BACKEND", "numba" if HAVE_NUMBA else "numpy").strip().lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"MDDR_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ImportError("MDDR_BACKEND=numba but numba is not installed")
    return name


BACKEND = _requested_backend()


# ---------------------------------------------------------------------------
# rank-space plan (shared by both backends)
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=256)
def rank_plan(m: int, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """North-west-corner plan between uniform measures on ``m`` and ``n`` sorted atoms.

    Breakpoints ``i/m`` and ``j/n`` are merged on the integer grid of
    ``m*n`` cells, so masses are exact rationals up to one final division.
    Returns ``(src_rank, tgt_rank, mass)``.
    """
    if m < 1 or n < 1:
        raise ValueError("atom counts must be positive")
    cuts = np.union1d(np.arange(m + 1, dtype=np.int64) * n, np.arange(n + 1, dtype=np.int64) * m)
    left = cuts[:-1]
    src = left // n
    tgt = left // m
    mass = np.diff(cuts) / float(m * n)
    for a in (src, tgt, mass):
        a.setflags(write=False)
    return src, tgt, mass


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------


def _pair_terms(delta, mass, p):
    ad = np.abs(delta)
    if p == 2.0:
        return mass * delta * delta, 2.0 * mass * delta, 2.0 * mass * np.ones_like(delta)
    cost = mass * ad**p
    g = p * mass * np.sign(delta) * ad ** (p - 1.0)
    if p == 1.0:
        c = np.zeros_like(delta)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.where(ad > 0.0, p * (p - 1.0) * mass * ad ** (p - 2.0), 0.0)
    return cost, g, c


def w1d_sorted_numpy(xs, ys, p):
    src, tgt, mass = rank_plan(xs.shape[0], ys.shape[0])
    cost, _, _ = _pair_terms(xs[src] - ys[tgt], mass, p)
    return float(cost.sum())


def sliced_terms_numpy(theta, Z, Y, p, want_grad, want_hess, JY):
    """See :func:`sliced_terms`."""
    L, d = theta.shape
    M = Z.shape[0]
    N = Y.shape[0]
    zp = theta @ Z.T
    yp = theta @ Y.T
    oz = np.argsort(zp, axis=1, kind="stable")
    oy = np.argsort(yp, axis=1, kind="stable")
    src, tgt, mass = rank_plan(M, N)
    a = oz[:, src]
    b = oy[:, tgt]
    delta = np.take_along_axis(zp, a, axis=1) - np.take_along_axis(yp, b, axis=1)
    cost, g, c = _pair_terms(delta, mass[None, :], p)
    total = float(cost.sum(axis=1).sum()) / L

    grad = hess = cross = None
    flat_a = a.ravel()
    if want_grad:
        grad = np.empty((M, d))
        for r in range(d):
            grad[:, r] = np.bincount(flat_a, weights=(g * theta[:, r : r + 1]).ravel(), minlength=M)
        grad /= L
    if want_hess:
        hess = np.empty((M, d, d))
        for r in range(d):
            for s in range(r, d):
                w = (c * (theta[:, r] * theta[:, s])[:, None]).ravel()
                hess[:, r, s] = np.bincount(flat_a, weights=w, minlength=M)
                hess[:, s, r] = hess[:, r, s]
        hess /= L
    if JY is not None:
        P = JY.shape[2]
        tjy = np.einsum("ld,jdp->ljp", theta, JY)
        gathered = np.take_along_axis(tjy, b[:, :, None], axis=1) * c[:, :, None]
        rows = (np.arange(L)[:, None] * M + a).ravel()
        S = np.zeros((L * M, P))
        np.add.at(S, rows, gathered.reshape(-1, P))
        cross = np.einsum("lr,lmp->mrp", theta, S.reshape(L, M, P)) / L
    return total, grad, hess, cross


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _pair_nb(delta, mass, p):
        ad = abs(delta)
        if p == 2.0:
            return mass * delta * delta, 2.0 * mass * delta, 2.0 * mass
        cost = mass * ad**p
        if ad == 0.0:
            return cost, 0.0, 0.0
        g = p * mass * ad ** (p - 1.0)
        if delta < 0.0:
            g = -g
        c = p * (p - 1.0) * mass * ad ** (p - 2.0)
        return cost, g, c

    @numba.njit(cache=True)
    def w1d_sorted_numba(xs, ys, p):
        m = xs.shape[0]
        n = ys.shape[0]
        scale = 1.0 / (m * n)
        i = 0
        j = 0
        pos = 0
        total = 0.0
        while i < m and j < n:
            ni = (i + 1) * n
            nj = (j + 1) * m
            nxt = ni if ni < nj else nj
            cost, _, _ = _pair_nb(xs[i] - ys[j], (nxt - pos) * scale, p)
            total += cost
            pos = nxt
            if ni == nxt:
                i += 1
            if nj == nxt:
                j += 1
        return total

    @numba.njit(cache=True)
    def _sliced_terms_nb(theta, Z, Y, p, want_grad, want_hess, want_cross, JY):
        L, d = theta.shape
        M = Z.shape[0]
        N = Y.shape[0]
        P = JY.shape[2]
        scale = 1.0 / (M * N)
        zp = np.empty(M)
        yp = np.empty(N)
        grad = np.zeros((M, d))
        hess = np.zeros((M, d, d))
        cross = np.zeros((M, d, P))
        tjy = np.zeros((N, P))
        srow = np.zeros((M, P))
        total = 0.0
        for l in range(L):
            th = theta[l]
            for a in range(M):
                acc = 0.0
                for r in range(d):
                    acc += Z[a, r] * th[r]
                zp[a] = acc
            for b in range(N):
                acc = 0.0
                for r in range(d):
                    acc += Y[b, r] * th[r]
                yp[b] = acc
            oz = np.argsort(zp, kind="mergesort")
            oy = np.argsort(yp, kind="mergesort")
            if want_cross:
                for b in range(N):
                    for q in range(P):
                        acc = 0.0
                        for r in range(d):
                            acc += th[r] * JY[b, r, q]
                        tjy[b, q] = acc
                srow[:, :] = 0.0
            i = 0
            j = 0
            pos = 0
            while i < M and j < N:
                ni = (i + 1) * N
                nj = (j + 1) * M
                nxt = ni if ni < nj else nj
                a = oz[i]
                b = oy[j]
                cost, g, c = _pair_nb(zp[a] - yp[b], (nxt - pos) * scale, p)
                total += cost
                if want_grad:
                    for r in range(d):
                        grad[a, r] += g * th[r]
                if want_hess and c != 0.0:
                    for r in range(d):
                        for s in range(d):
                            hess[a, r, s] += c * th[r] * th[s]
                if want_cross and c != 0.0:
                    for q in range(P):
                        srow[a, q] += c * tjy[b, q]
                pos = nxt
                if ni == nxt:
                    i += 1
                if nj == nxt:
                    j += 1
            if want_cross:
                for a in range(M):
                    for r in range(d):
                        for q in range(P):
                            cross[a, r, q] += th[r] * srow[a, q]
        inv = 1.0 / L
        return total * inv, grad * inv, hess * inv, cross * inv

    def sliced_terms_numba(theta, Z, Y, p, want_grad, want_hess, JY):
        """See :func:`sliced_terms`."""
        want_cross = JY is not None
        if not want_cross:
            JY = np.zeros((Y.shape[0], Z.shape[1], 0))
        total, grad, hess, cross = _sliced_terms_nb(
            theta, Z, Y, float(p), bool(want_grad), bool(want_hess), want_cross, JY
        )
        return (
            total,
            grad if want_grad else None,
            hess if want_hess else None,
            cross if want_cross else None,
        )


    @numba.njit(cache=True)
    def _barycenter_terms_nb(theta, Z, Ycat, ystart, psrc, ptgt, pmass, pstart, pi, p, want_hess,
                             want_direct, JYcat, jcol, jwidth, n_phi, Fcat, fwidth):
        L, d = theta.shape
        M = Z.shape[0]
        K = pi.shape[0]
        Pmax = JYcat.shape[2]
        Fmax = Fcat.shape[1]
        h = np.zeros((M, d))
        hess = np.zeros((M, d, d))
        direct = np.zeros((M, d, K))
        cross = np.zeros((M, d, n_phi))
        feat = np.zeros((K, L, M, Fmax))
        zp = np.empty(M)
        cvec = np.zeros(M)
        gvec = np.zeros(M)
        srow = np.zeros((M, Pmax))
        Nmax = 0
        for k in range(K):
            nk = ystart[k + 1] - ystart[k]
            if nk > Nmax:
                Nmax = nk
        yp = np.empty(Nmax)
        tjy = np.zeros((Nmax, Pmax))
        for l in range(L):
            th = theta[l]
            for a in range(M):
                acc = 0.0
                for r in range(d):
                    acc += Z[a, r] * th[r]
                zp[a] = acc
            oz = np.argsort(zp, kind="mergesort")
            cvec[:] = 0.0
            for k in range(K):
                y0 = ystart[k]
                N = ystart[k + 1] - y0
                wk = jwidth[k]
                fk = fwidth[k]
                pk = pi[k]
                fscale = pk / L
                for b in range(N):
                    acc = 0.0
                    for r in range(d):
                        acc += Ycat[y0 + b, r] * th[r]
                    yp[b] = acc
                oy = np.argsort(yp[:N], kind="mergesort")
                if wk > 0:
                    for b in range(N):
                        for q in range(wk):
                            acc = 0.0
                            for r in range(d):
                                acc += th[r] * JYcat[y0 + b, r, q]
                            tjy[b, q] = acc
                    srow[:, :wk] = 0.0
                gvec[:] = 0.0
                for t in range(pstart[k], pstart[k + 1]):
                    a = oz[psrc[t]]
                    b = oy[ptgt[t]]
                    _, g, c = _pair_nb(zp[a] - yp[b], pmass[t], p)
                    gvec[a] += g
                    if c != 0.0:
                        cvec[a] += pk * c
                        if wk > 0:
                            for q in range(wk):
                                srow[a, q] += c * tjy[b, q]
                        if fk > 0:
                            cb = c * fscale
                            for q in range(fk - 1):
                                feat[k, l, a, q] += cb * Fcat[y0 + b, q]
                            feat[k, l, a, fk - 1] += cb
                for a in range(M):
                    ga = gvec[a]
                    for r in range(d):
                        gr = ga * th[r]
                        h[a, r] += pk * gr
                        if want_direct:
                            direct[a, r, k] += gr
                if wk > 0:
                    col = jcol[k]
                    for a in range(M):
                        for r in range(d):
                            f = pk * th[r]
                            for q in range(wk):
                                cross[a, r, col + q] += f * srow[a, q]
            if want_hess:
                for a in range(M):
                    ca = cvec[a]
                    if ca != 0.0:
                        for r in range(d):
                            for s in range(d):
                                hess[a, r, s] += ca * th[r] * th[s]
        inv = 1.0 / L
        return h * inv, hess * inv, direct * inv, cross * inv, feat

else:  # pragma: no cover
    w1d_sorted_numba = None
    sliced_terms_numba = None
    _barycenter_terms_nb = None


def sliced_terms(theta, Z, Y, p, want_grad=False, want_hess=False, JY=None):
    """Sweep every projection's optimal 1-D plan between ``Z`` and ``Y``.

    Parameters
    ----------
    theta : ndarray, shape (L, d)
        Unit projection directions.
    Z, Y : ndarray, shapes (M, d) and (N, d)
        Source and target atoms (uniform weights).
    p : float
        Ground-cost order.
    want_grad, want_hess : bool
        Also accumulate the plan-frozen gradient and Hessian blocks.
    JY : ndarray, shape (N, d, P), optional
        Jacobian of each target atom w.r.t. some parameter block. When
        given, the cross term ``sum c * theta theta^T JY[j]`` is returned.

    Returns
    -------
    cost : float
        ``(1/L) sum_l W_p^p`` on the projected measures.
    grad : ndarray (M, d) or None
    hess : ndarray (M, d, d) or None
        Per-atom ``(1/L) sum c theta theta^T`` with
        ``c = mass * p (p-1) |delta|^(p-2)``.
    cross : ndarray (M, d, P) or None
    """
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if JY is not None:
        JY = np.ascontiguousarray(JY, dtype=np.float64)
    if BACKEND == "numba":
        return sliced_terms_numba(theta, Z, Y, p, want_grad, want_hess, JY)
    return sliced_terms_numpy(theta, Z, Y, p, want_grad, want_hess, JY)


def w1d_sorted(xs, ys, p):
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    if BACKEND == "numba":
        return float(w1d_sorted_numba(xs, ys, float(p)))
    return w1d_sorted_numpy(xs, ys, float(p))


def _concat_marginals(Ys):
    ystart = np.zeros(len(Ys) + 1, dtype=np.int64)
    ystart[1:] = np.cumsum([Y.shape[0] for Y in Ys])
    Ycat = np.ascontiguousarray(np.concatenate(Ys, axis=0), dtype=np.float64)
    return Ycat, ystart


@functools.lru_cache(maxsize=64)
def _concat_plans_cached(M: int, sizes: tuple):
    plans = [rank_plan(M, n) for n in sizes]
    pstart = np.zeros(len(sizes) + 1, dtype=np.int64)
    pstart[1:] = np.cumsum([pl[0].size for pl in plans])
    src = np.concatenate([pl[0] for pl in plans]).astype(np.int64)
    tgt = np.concatenate([pl[1] for pl in plans]).astype(np.int64)
    mass = np.concatenate([pl[2] for pl in plans])
    return src, tgt, mass, pstart


def _concat_plans(M, Ys):
    return _concat_plans_cached(int(M), tuple(int(Y.shape[0]) for Y in Ys))


def barycenter_terms_numpy(theta, Z, Ys, pi, p, want_hess, want_direct, jacs, n_phi):
    """See :func:`barycenter_terms`."""
    M, d = Z.shape
    K = len(Ys)
    h = np.zeros((M, d))
    hess = np.zeros((M, d, d)) if want_hess else None
    direct = np.zeros((M, d, K)) if want_direct else None
    cross = np.zeros((M, d, n_phi)) if n_phi else None
    for k, Y in enumerate(Ys):
        blk = jacs[k] if jacs is not None else None
        JY = None if blk is None else blk[1]
        _, grad, hk, ck = sliced_terms_numpy(theta, Z, Y, p, True, want_hess, JY)
        h += pi[k] * grad
        if want_hess:
            hess += pi[k] * hk
        if want_direct:
            direct[:, :, k] = grad
        if ck is not None:
            cross[:, :, blk[0] : blk[0] + ck.shape[2]] += pi[k] * ck
    return h, hess, direct, cross


def barycenter_terms_numba(theta, Z, Ys, pi, p, want_hess, want_direct, jacs, n_phi):
    """See :func:`barycenter_terms`."""
    M, d = Z.shape
    K = len(Ys)
    Ycat, ystart = _concat_marginals(Ys)
    jcol = np.zeros(K, dtype=np.int64)
    jwidth = np.zeros(K, dtype=np.int64)
    fwidth = np.zeros(K, dtype=np.int64)
    dense = []
    Fcat = np.zeros((Ycat.shape[0], 1))
    if jacs is not None and n_phi:
        # affine blocks go through the feature path, anything else stays dense
        for k, b in enumerate(jacs):
            if b is None:
                continue
            F = b[2] if len(b) > 2 else None
            if F is not None:
                fwidth[k] = F.shape[1] + 1
            else:
                dense.append(k)
        Fmax = int(fwidth.max()) if K else 0
        if Fmax:
            Fcat = np.zeros((Ycat.shape[0], Fmax))
            for k, b in enumerate(jacs):
                if fwidth[k]:
                    Fcat[ystart[k] : ystart[k + 1], : fwidth[k] - 1] = b[2]
        Pmax = max([jacs[k][1].shape[2] for k in dense], default=1)
        JYcat = np.zeros((Ycat.shape[0], d, Pmax))
        for k in dense:
            w = jacs[k][1].shape[2]
            jcol[k] = jacs[k][0]
            jwidth[k] = w
            JYcat[ystart[k] : ystart[k + 1], :, :w] = jacs[k][1]
    else:
        JYcat = np.zeros((Ycat.shape[0], d, 1))
        n_phi = 0
    psrc, ptgt, pmass, pstart = _concat_plans(M, Ys)
    h, hess, direct, cross, feat = _barycenter_terms_nb(
        theta, Z, Ycat, ystart, psrc, ptgt, pmass, pstart, np.ascontiguousarray(pi, dtype=np.float64), float(p),
        bool(want_hess), bool(want_direct), JYcat, jcol, jwidth, int(n_phi), Fcat, fwidth,
    )
    if n_phi and fwidth.any():
        tt = theta[:, :, None] * theta[:, None, :]
        # G[k, a, r, r2, s] = sum_l theta_r theta_r2 feat[k, l, a, s]
        Lp = theta.shape[0]
        G = (tt.reshape(Lp, d * d).T @ feat.transpose(1, 0, 2, 3).reshape(Lp, -1)).reshape(d, d, K, M, -1)
        for k in np.flatnonzero(fwidth):
            hk = int(fwidth[k]) - 1
            Gk = G[:, :, k].transpose(2, 0, 1, 3)
            off = jacs[k][0]
            cross[:, :, off : off + d * hk] += Gk[:, :, :, :hk].reshape(M, d, d * hk)
            cross[:, :, off + d * hk : off + d * hk + d] += Gk[:, :, :, hk]
    return h, hess if want_hess else None, direct if want_direct else None, cross if n_phi else None


def barycenter_terms(theta, Z, Ys, pi, p, want_hess=False, want_direct=False, jacs=None, n_phi=0):
    """All per-iteration sums of the barycenter solver in one sweep.

    The barycenter atoms are projected and sorted once per direction and
    matched against every marginal in turn.

    Parameters
    ----------
    theta : (L, d) directions
    Z : (M, d) barycenter atoms
    Ys : list of (N_k, d) marginal atoms
    pi : (K,) weights
    jacs : list of ``(column_offset, (N_k, d, P_k) array)`` or ``None`` per marginal
    n_phi : total parameter count (width of ``cross``)

    Returns
    -------
    h : (M, d)
        ``sum_k pi_k`` times the plan-frozen gradient of ``SW_p^p(Z, Y_k)``.
    hess : (M, d, d) or None
        ``sum_k pi_k (1/L) sum c theta theta^T``.
    direct : (M, d, K) or None
        Unweighted per-marginal gradients (``d h / d pi_k`` at fixed ``Z``).
    cross : (M, d, n_phi) or None
        ``sum_k pi_k (1/L) sum c theta theta^T JY_k[j]`` placed at each block's columns.
    """
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    Ys = [np.ascontiguousarray(Y, dtype=np.float64) for Y in Ys]
    if BACKEND == "numba":
        return barycenter_terms_numba(theta, Z, Ys, pi, p, want_hess, want_direct, jacs, n_phi)
    return barycenter_terms_numpy(theta, Z, Ys, pi, p, want_hess, want_direct, jacs, n_phi)
