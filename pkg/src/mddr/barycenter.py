"""Free-support sliced Wasserstein barycenter solved with Adam.

The solver moves ``M_G`` atoms ``z`` to minimise ``sum_k pi_k SW_p^p(z, F_k)``.
Optionally it carries forward-mode Jacobians of ``z`` with respect to the
regression parameters that generate the marginals (``jac_phi``) and with
respect to the barycenter weights (``jac_pi``).

Jacobian propagation differentiates the Adam recursion exactly, including the
dependence of the moment estimates on earlier gradients. Setting
``jacobian_mode="frozen_moments"`` instead treats ``m^{(t-1)}`` and
``v^{(t-1)}`` as constants at each step, which is cheaper and matches the
exact derivative only for ``T = 1``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .rng import Key, TAG_HOLDOUT, TAG_SOLVER, TAG_SOLVER_INIT, as_key, stream
from .sliced import EmpiricalDistribution, Measure, ProjectionSet, as_points, sample_projections

DIVERGENCE_BOUND = 1e8


class DivergenceError(FloatingPointError):
    """Raised when barycenter atoms or gradients stop being finite."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass(frozen=True)
class SwbConfig:
    T: int = 100
    eta: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    M_G: Optional[int] = None
    L_solver: int = 100
    p: float = 2.0
    seed: int = 0
    jacobian_mode: str = "exact"

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ValueError("; ".join(errors))

    def problems(self) -> list[str]:
        out = []
        if not (isinstance(self.T, (int, np.integer)) and self.T >= 1):
            out.append("T: must be an integer >= 1")
        if not self.eta > 0:
            out.append("eta: must be > 0")
        if not 0 <= self.beta1 < 1:
            out.append("beta1: must be in [0, 1)")
        if not 0 <= self.beta2 < 1:
            out.append("beta2: must be in [0, 1)")
        if not self.epsilon > 0:
            out.append("epsilon: must be > 0")
        if self.M_G is not None and not self.M_G >= 1:
            out.append("M_G: must be >= 1")
        if not self.L_solver >= 1:
            out.append("L_solver: must be >= 1")
        if not self.p >= 1:
            out.append("p: must be >= 1")
        if self.jacobian_mode not in ("exact", "frozen_moments"):
            out.append("jacobian_mode: must be 'exact' or 'frozen_moments'")
        return out


@dataclass(frozen=True)
class BlockJacobian:
    """Jacobian of marginal atoms w.r.t. one contiguous slice of ``phi``.

    ``values[j, r, q]`` is ``d y_j[r] / d phi[offset + q]``; all other
    columns of ``phi`` do not move these atoms.

    ``features`` optionally declares affine structure: when ``y_j = A x_j + b``
    with ``(vec(A), b)`` laid out row-major then ``b``, passing the ``(N, h)``
    predictor atoms lets the fast kernel skip the dense Jacobian.
    """

    offset: int
    values: np.ndarray
    features: Optional[np.ndarray] = None


@dataclass
class BarycenterState:
    z: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    jac_phi: Optional[np.ndarray] = None
    jac_pi: Optional[np.ndarray] = None
    # moment Jacobians (exact mode only)
    _jm_phi: Optional[np.ndarray] = field(default=None, repr=False)
    _jv_phi: Optional[np.ndarray] = field(default=None, repr=False)
    _jm_pi: Optional[np.ndarray] = field(default=None, repr=False)
    _jv_pi: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def initial(cls, z, n_phi: Optional[int] = None, n_pi: Optional[int] = None, jac_phi0=None):
        z = np.array(z, dtype=np.float64)
        M, d = z.shape
        state = cls(z=z, m=np.zeros_like(z), v=np.zeros_like(z))
        if n_phi is not None:
            state.jac_phi = np.zeros((M, d, n_phi)) if jac_phi0 is None else np.array(jac_phi0, dtype=np.float64)
            state._jm_phi = np.zeros((M, d, n_phi))
            state._jv_phi = np.zeros((M, d, n_phi))
        if n_pi is not None:
            state.jac_pi = np.zeros((M, d, n_pi))
            state._jm_pi = np.zeros((M, d, n_pi))
            state._jv_pi = np.zeros((M, d, n_pi))
        return state


@dataclass
class SwbResult:
    barycenter: EmpiricalDistribution
    trace: np.ndarray
    jac_phi: Optional[np.ndarray] = None
    jac_pi: Optional[np.ndarray] = None

    @property
    def atoms(self) -> np.ndarray:
        return self.barycenter.points

    def __iter__(self):
        # (barycenter, trace) unpacking
        yield self.barycenter
        yield self.trace


def _validate(marginals, pi):
    Ys = [as_points(F) for F in marginals]
    if not Ys:
        raise ValueError("need at least one marginal")
    d = Ys[0].shape[1]
    for k, Y in enumerate(Ys):
        if Y.shape[1] != d:
            raise ValueError(f"marginal {k} has dimension {Y.shape[1]}, expected {d}")
    pi = np.asarray(pi, dtype=np.float64).ravel()
    if pi.size != len(Ys):
        raise ValueError(f"{len(Ys)} marginals but {pi.size} weights")
    return Ys, pi, d


def swb_objective(z: Measure, marginals: Sequence[Measure], pi, proj: ProjectionSet, p: float = 2.0) -> float:
    """``sum_k pi_k SW_p^p(z, F_k)`` on the directions in ``proj``."""
    Ys, pi, d = _validate(marginals, pi)
    Z = as_points(z)
    if Z.shape[1] != d or proj.dim != d:
        raise ValueError("dimension mismatch between barycenter, marginals and projections")
    total = 0.0
    for k, Y in enumerate(Ys):
        cost, _, _, _ = kernels.sliced_terms(proj.directions, Z, Y, p)
        total += pi[k] * cost
    return total


def swb_grad_support(state, marginals: Sequence[Measure], pi, proj: ProjectionSet, p: float = 2.0) -> np.ndarray:
    """Plan-frozen gradient of :func:`swb_objective` w.r.t. the barycenter atoms."""
    Z = state.z if isinstance(state, BarycenterState) else as_points(state)
    h, _, _ = support_derivatives(Z, marginals, pi, proj, p)
    return h


def support_derivatives(
    Z,
    marginals,
    pi,
    proj: ProjectionSet,
    p: float = 2.0,
    jac_phi=None,
    pushforward_jacobians: Optional[Sequence[Optional[BlockJacobian]]] = None,
    jac_pi=None,
):
    """Gradient ``h`` of the barycenter objective and its derivatives.

    Returns ``(h, dh_dphi, dh_dpi)``. ``dh_dphi`` is computed when
    ``jac_phi`` is given (``pushforward_jacobians`` entries may be ``None``
    for marginals that do not depend on ``phi``); ``dh_dpi`` when ``jac_pi``
    is given. Both hold the optimal plans fixed at the current atoms.
    """
    Ys, pi, d = _validate(marginals, pi)
    Z = np.asarray(Z, dtype=np.float64)
    want_phi = jac_phi is not None
    want_pi = jac_pi is not None
    jacs = None
    n_phi = 0
    if want_phi and pushforward_jacobians is not None:
        n_phi = jac_phi.shape[2]
        jacs = [None if b is None else (b.offset, b.values, b.features) for b in pushforward_jacobians]
    h, H, direct, cross = kernels.barycenter_terms(
        proj.directions, Z, Ys, pi, p,
        want_hess=want_phi or want_pi, want_direct=want_pi, jacs=jacs, n_phi=n_phi,
    )
    dh_phi = dh_pi = None
    if want_phi:
        dh_phi = np.matmul(H, jac_phi)
        if cross is not None:
            dh_phi -= cross
    if want_pi:
        dh_pi = direct + np.matmul(H, jac_pi)
    return h, dh_phi, dh_pi


def _propagate(J, Jm, Jv, dh, h, mhat, vhat, s, bc1, bc2, cfg):
    b1, b2 = cfg.beta1, cfg.beta2
    if cfg.jacobian_mode == "exact":
        Jm = b1 * Jm + (1.0 - b1) * dh
        Jv = b2 * Jv + 2.0 * (1.0 - b2) * h[..., None] * dh
        dmhat = Jm / bc1
        dvhat = Jv / bc2
    else:
        dmhat = (1.0 - b1) / bc1 * dh
        dvhat = 2.0 * (1.0 - b2) / bc2 * h[..., None] * dh
    root = np.sqrt(vhat)
    with np.errstate(divide="ignore", invalid="ignore"):
        dsq = np.where(root[..., None] > 0.0, dvhat / (2.0 * root[..., None]), 0.0)
    J = J - cfg.eta * (dmhat / s[..., None] - (mhat / s**2)[..., None] * dsq)
    return J, Jm, Jv


def adam_step(state: BarycenterState, h, cfg: SwbConfig, dh_phi=None, dh_pi=None) -> BarycenterState:
    """One bias-corrected Adam update of the atoms (and tracked Jacobians)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != state.z.shape:
        raise ValueError(f"gradient shape {h.shape} does not match atoms {state.z.shape}")
    if not np.all(np.isfinite(h)):
        raise DivergenceError("non-finite barycenter gradient", state.t + 1)
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    m = b1 * state.m + (1.0 - b1) * h
    v = b2 * state.v + (1.0 - b2) * h * h
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    mhat = m / bc1
    vhat = v / bc2
    s = np.sqrt(vhat) + cfg.epsilon
    z = state.z - cfg.eta * mhat / s
    new = dataclasses.replace(state, z=z, m=m, v=v, t=t)
    if state.jac_phi is not None and dh_phi is not None:
        new.jac_phi, new._jm_phi, new._jv_phi = _propagate(
            state.jac_phi, state._jm_phi, state._jv_phi, dh_phi, h, mhat, vhat, s, bc1, bc2, cfg
        )
    if state.jac_pi is not None and dh_pi is not None:
        new.jac_pi, new._jm_pi, new._jv_pi = _propagate(
            state.jac_pi, state._jm_pi, state._jv_pi, dh_pi, h, mhat, vhat, s, bc1, bc2, cfg
        )
    if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > DIVERGENCE_BOUND:
        raise DivergenceError("barycenter atoms diverged", t)
    return new


def jac_phi_step(state, marginals, pi, proj, p, pushforward_jacobians, cfg: SwbConfig) -> np.ndarray:
    """Advance ``state.jac_phi`` by one solver iteration and return it."""
    if state.jac_phi is None:
        raise ValueError("state does not track jac_phi")
    n_phi = state.jac_phi.shape[2]
    for blk in pushforward_jacobians:
        if blk is not None and blk.offset + blk.values.shape[2] > n_phi:
            raise ValueError("pushforward Jacobian block exceeds the parameter layout")
    h, dh_phi, _ = support_derivatives(state.z, marginals, pi, proj, p, state.jac_phi, pushforward_jacobians)
    return adam_step(state, h, cfg, dh_phi=dh_phi).jac_phi


def jac_pi_step(state, marginals, pi, proj, p, cfg: SwbConfig) -> np.ndarray:
    """Advance ``state.jac_pi`` by one solver iteration and return it."""
    if state.jac_pi is None:
        raise ValueError("state does not track jac_pi")
    h, _, dh_pi = support_derivatives(state.z, marginals, pi, proj, p, jac_pi=state.jac_pi)
    return adam_step(state, h, cfg, dh_pi=dh_pi).jac_pi


def initial_atoms(Ys, pi, M_G, key):
    """Draw ``M_G`` atoms from the ``pi``-mixture of marginal atoms.

    Returns the atoms and, for each, the ``(k, j)`` source so Jacobians of
    the initial state can be seeded from the marginal atoms they copy.
    """
    # one (component, atom) uniform pair per atom, so a small change in pi
    # only re-routes the atoms whose component draw crosses a cdf boundary
    u = stream(key).random((M_G, 2))
    cdf = np.cumsum(pi)
    cdf /= cdf[-1]
    ks = np.minimum(np.searchsorted(cdf, u[:, 0], side="right"), len(Ys) - 1)
    sizes = np.array([Y.shape[0] for Y in Ys])
    js = np.minimum((u[:, 1] * sizes[ks]).astype(np.int64), sizes[ks] - 1)
    atoms = np.stack([Ys[k][j] for k, j in zip(ks, js)])
    return atoms, ks, js


def swb_solve(
    marginals: Sequence[Measure],
    pi,
    cfg: SwbConfig = SwbConfig(),
    init=None,
    *,
    key: Optional[Key] = None,
    pushforward_jacobians: Optional[Sequence[Optional[BlockJacobian]]] = None,
    n_phi: Optional[int] = None,
    track_pi: bool = False,
    record_trace: bool = True,
    L_holdout: int = 1000,
) -> SwbResult:
    """Run ``cfg.T`` Adam iterations on the free-support barycenter.

    Parameters
    ----------
    marginals : sequence of (M_k, d) arrays or EmpiricalDistribution
    pi : array_like, shape (K,)
    cfg : SwbConfig
    init : (M_G, d) array, optional
        Starting atoms; treated as constant w.r.t. ``phi`` and ``pi``. By
        default atoms are drawn from the ``pi``-mixture of marginal atoms.
    key : stream key, optional
        Projection/initialisation stream; defaults to ``cfg.seed``.
        Iteration ``t`` uses ``key + (TAG_SOLVER, t)``.
    pushforward_jacobians, n_phi
        Enable ``jac_phi`` tracking with ``n_phi`` total parameters.
    track_pi : bool
        Enable ``jac_pi`` tracking.
    record_trace : bool
        Evaluate the objective on a held-out projection set before the first
        and after every iteration.

    Returns
    -------
    SwbResult
    """
    Ys, pi, d = _validate(marginals, pi)
    key = as_key(cfg.seed if key is None else key)
    want_phi = pushforward_jacobians is not None
    if want_phi and n_phi is None:
        raise ValueError("n_phi is required when pushforward_jacobians are given")

    jac_phi0 = None
    if init is None:
        M_G = cfg.M_G or max(Y.shape[0] for Y in Ys)
        Z0, ks, js = initial_atoms(Ys, pi, M_G, key + (TAG_SOLVER_INIT,))
        if want_phi:
            jac_phi0 = np.zeros((M_G, d, n_phi))
            for ell, (k, j) in enumerate(zip(ks, js)):
                blk = pushforward_jacobians[k]
                if blk is not None:
                    w = blk.values.shape[2]
                    jac_phi0[ell, :, blk.offset : blk.offset + w] = blk.values[j]
    else:
        Z0 = as_points(init).copy()
        if Z0.shape[1] != d:
            raise ValueError(f"init atoms have dimension {Z0.shape[1]}, expected {d}")

    state = BarycenterState.initial(
        Z0, n_phi=n_phi if want_phi else None, n_pi=len(Ys) if track_pi else None, jac_phi0=jac_phi0
    )
    holdout = sample_projections(L_holdout, d, key + (TAG_HOLDOUT,)) if record_trace else None
    trace = [swb_objective(state.z, Ys, pi, holdout, cfg.p)] if record_trace else []
    for t in range(1, cfg.T + 1):
        proj = sample_projections(cfg.L_solver, d, key + (TAG_SOLVER, t))
        h, dh_phi, dh_pi = support_derivatives(
            state.z, Ys, pi, proj, cfg.p,
            jac_phi=state.jac_phi, pushforward_jacobians=pushforward_jacobians,
            jac_pi=state.jac_pi,
        )
        state = adam_step(state, h, cfg, dh_phi=dh_phi, dh_pi=dh_pi)
        if record_trace:
            trace.append(swb_objective(state.z, Ys, pi, holdout, cfg.p))
    return SwbResult(
        barycenter=EmpiricalDistribution(state.z),
        trace=np.asarray(trace),
        jac_phi=state.jac_phi,
        jac_pi=state.jac_pi,
    )
