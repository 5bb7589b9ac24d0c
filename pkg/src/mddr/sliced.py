"""Exact 1-D optimal transport and Monte Carlo sliced Wasserstein distances.

All measures are uniform-weight point clouds. Unequal atom counts are
handled exactly on the merged quantile grid, never by resampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import kernels
from .rng import Key, as_key, stream


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Uniform-weight point cloud; each of the ``M`` rows carries mass ``1/M``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError(f"points must be an (M, d) array with M, d >= 1, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.n_atoms


Measure = Union[EmpiricalDistribution, np.ndarray]


def as_points(G: Measure) -> np.ndarray:
    """Return the ``(M, d)`` float array behind ``G``."""
    if isinstance(G, EmpiricalDistribution):
        return G.points
    pts = np.asarray(G, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
        raise ValueError(f"expected an (M, d) point array, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class ProjectionSet:
    directions: np.ndarray
    seed: tuple

    @property
    def n_projections(self) -> int:
        return self.directions.shape[0]

    @property
    def dim(self) -> int:
        return self.directions.shape[1]


@dataclass(frozen=True)
class TransportPlan1D:
    """Monotone plan as parallel arrays of source index, target index and mass.

    Indices refer to positions in the *sorted* inputs handed to
    :func:`transport_plan_1d`.
    """

    source: np.ndarray
    target: np.ndarray
    mass: np.ndarray

    def triples(self):
        return list(zip(self.source.tolist(), self.target.tolist(), self.mass.tolist()))

    def cost(self, xs, ys, p: float) -> float:
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        return float(np.sum(self.mass * np.abs(xs[self.source] - ys[self.target]) ** p))


def sample_projections(L: int, d: int, seed: Key) -> ProjectionSet:
    """Draw ``L`` i.i.d. directions uniform on the unit sphere in ``R^d``.

    Gaussian vectors normalised to unit length; the stream is keyed by
    ``seed`` so the same ``(seed, L, d)`` always gives the same matrix.
    """
    if int(L) < 1:
        raise ValueError(f"number of projections must be >= 1, got {L}")
    if int(d) < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    key = as_key(seed)
    g = stream(key).standard_normal((int(L), int(d)))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    # a zero Gaussian draw has probability zero; guard anyway
    while np.any(norms == 0.0):  # pragma: no cover
        bad = norms[:, 0] == 0.0
        g[bad] = stream(key, int(bad.sum())).standard_normal((int(bad.sum()), int(d)))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
    directions = g / norms
    directions.setflags(write=False)
    return ProjectionSet(directions, key)


def _check_sorted_1d(xs, name):
    a = np.asarray(xs, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError(f"{name} must be a nonempty 1-D array")
    if np.any(np.isnan(a)):
        raise ValueError(f"{name} contains NaN")
    if np.any(np.diff(a) < 0):
        raise ValueError(f"{name} must be sorted ascending")
    return a


def _check_p(p):
    p = float(p)
    if not p >= 1.0:
        raise ValueError(f"order p must be >= 1, got {p}")
    return p


def wasserstein_1d_pp(xs, ys, p: float = 2.0) -> float:
    """``W_p^p`` between two uniform measures given their sorted atoms."""
    p = _check_p(p)
    xs = _check_sorted_1d(xs, "xs")
    ys = _check_sorted_1d(ys, "ys")
    return kernels.w1d_sorted(xs, ys, p)


def transport_plan_1d(xs, ys) -> TransportPlan1D:
    """North-west-corner (monotone) optimal plan between sorted uniform measures."""
    xs = _check_sorted_1d(xs, "xs")
    ys = _check_sorted_1d(ys, "ys")
    src, tgt, mass = kernels.rank_plan(xs.size, ys.size)
    return TransportPlan1D(src.copy(), tgt.copy(), mass.copy())


def _check_dims(G1, G2, proj):
    if G1.shape[1] != G2.shape[1]:
        raise ValueError(f"dimension mismatch: {G1.shape[1]} vs {G2.shape[1]}")
    if proj.dim != G1.shape[1]:
        raise ValueError(f"projections live in R^{proj.dim}, measures in R^{G1.shape[1]}")


def sw_distance_pp(G1: Measure, G2: Measure, proj: ProjectionSet, p: float = 2.0) -> float:
    """Monte Carlo ``SW_p^p`` over the directions in ``proj``."""
    p = _check_p(p)
    X = as_points(G1)
    Y = as_points(G2)
    _check_dims(X, Y, proj)
    cost, _, _, _ = kernels.sliced_terms(proj.directions, X, Y, p)
    return cost


def sw_grad_points(G1: Measure, G2: Measure, proj: ProjectionSet, p: float = 2.0) -> np.ndarray:
    """Gradient of :func:`sw_distance_pp` w.r.t. the atoms of ``G1``, plans held fixed."""
    p = _check_p(p)
    X = as_points(G1)
    Y = as_points(G2)
    _check_dims(X, Y, proj)
    _, grad, _, _ = kernels.sliced_terms(proj.directions, X, Y, p, want_grad=True)
    return grad
