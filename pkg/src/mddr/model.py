"""Generalized likelihood for multiple density-density regression.

The fitted response for observation ``i`` is the sliced Wasserstein
barycenter of the linear push-forwards ``A_k x + b_k`` of its predictors,
weighted by ``pi``; the log generalized likelihood is ``-w SW_p^p`` between
that barycenter and the observed response.

Parameter layout: ``phi`` concatenates, for ``k = 1..K``, the entries of
``A_k`` in row-major order followed by ``b_k``. The weights are carried as
an unconstrained vector ``omega`` of length ``K - 1`` with ``pi_K`` as the
softmax anchor.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .barycenter import BlockJacobian, SwbConfig, swb_solve
from .rng import Key, TAG_EVAL, as_key
from .sliced import EmpiricalDistribution, as_points, sample_projections, sw_distance_pp, sw_grad_points

log = logging.getLogger(__name__)

PI_FLOOR = 1e-300


@dataclass(frozen=True)
class LinearMap:
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64).ravel()
        if A.ndim != 2 or A.shape[0] != b.size:
            raise ValueError(f"A must be (d, h) and b length d; got A {A.shape}, b {b.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("linear map entries must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def out_dim(self) -> int:
        return self.A.shape[0]

    @property
    def in_dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_params(self) -> int:
        return self.A.size + self.b.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.b])

    @classmethod
    def from_flat(cls, vec, d: int, h: int) -> "LinearMap":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[: d * h].reshape(d, h), vec[d * h : d * h + d])

    def __call__(self, X):
        return np.asarray(X, dtype=np.float64) @ self.A.T + self.b


@dataclass(frozen=True)
class ModelParams:
    maps: tuple
    omega: np.ndarray = field(default=None)

    def __post_init__(self):
        maps = tuple(self.maps)
        if not maps:
            raise ValueError("need at least one linear map")
        d = maps[0].out_dim
        if any(m.out_dim != d for m in maps):
            raise ValueError("all maps must share the response dimension")
        omega = np.zeros(len(maps) - 1) if self.omega is None else np.array(self.omega, dtype=np.float64).ravel()
        if omega.size != len(maps) - 1:
            raise ValueError(f"omega must have length K-1 = {len(maps) - 1}, got {omega.size}")
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "omega", omega)

    @property
    def K(self) -> int:
        return len(self.maps)

    @property
    def d(self) -> int:
        return self.maps[0].out_dim

    @property
    def in_dims(self) -> tuple:
        return tuple(m.in_dim for m in self.maps)

    @property
    def pi(self) -> np.ndarray:
        return simplex_forward(self.omega)

    @property
    def phi(self) -> np.ndarray:
        return np.concatenate([m.flat() for m in self.maps])

    @property
    def n_phi(self) -> int:
        return sum(m.n_params for m in self.maps)

    def offsets(self) -> list[int]:
        return list(np.cumsum([0] + [m.n_params for m in self.maps])[:-1])

    def with_phi(self, phi) -> "ModelParams":
        return ModelParams(unflatten_phi(phi, self.d, self.in_dims), self.omega)

    def with_omega(self, omega) -> "ModelParams":
        return ModelParams(self.maps, omega)

    @classmethod
    def from_vectors(cls, phi, omega, d: int, in_dims: Sequence[int]) -> "ModelParams":
        return cls(unflatten_phi(phi, d, in_dims), omega)


def unflatten_phi(phi, d: int, in_dims: Sequence[int]) -> tuple:
    phi = np.asarray(phi, dtype=np.float64).ravel()
    expected = sum(d * h + d for h in in_dims)
    if phi.size != expected:
        raise ValueError(f"phi has length {phi.size}, layout needs {expected}")
    maps = []
    pos = 0
    for h in in_dims:
        n = d * h + d
        maps.append(LinearMap.from_flat(phi[pos : pos + n], d, h))
        pos += n
    return tuple(maps)


@dataclass(frozen=True)
class Observation:
    predictors: tuple
    response: EmpiricalDistribution

    def __post_init__(self):
        preds = tuple(
            F if isinstance(F, EmpiricalDistribution) else EmpiricalDistribution(F) for F in self.predictors
        )
        resp = self.response if isinstance(self.response, EmpiricalDistribution) else EmpiricalDistribution(self.response)
        if not preds:
            raise ValueError("an observation needs at least one predictor")
        object.__setattr__(self, "predictors", preds)
        object.__setattr__(self, "response", resp)

    @property
    def K(self) -> int:
        return len(self.predictors)

    def restrict(self, which: Sequence[int]) -> "Observation":
        return Observation(tuple(self.predictors[k] for k in which), self.response)


@dataclass(frozen=True)
class LikelihoodConfig:
    w: float = 10.0
    p: float = 2.0
    L_eval: int = 1000
    swb: SwbConfig = SwbConfig()

    def __post_init__(self):
        if not self.w > 0:
            raise ValueError("w: must be > 0")
        if not self.p >= 1:
            raise ValueError("p: must be >= 1")
        if not self.L_eval >= 1:
            raise ValueError("L_eval: must be >= 1")


@dataclass(frozen=True)
class PriorConfig:
    laplace_scale: float = 1.0
    normal_variance: float = 1e3
    alpha: Optional[tuple] = None  # defaults to 0.01 per weight

    def __post_init__(self):
        if not self.laplace_scale > 0:
            raise ValueError("laplace_scale: must be > 0")
        if not self.normal_variance > 0:
            raise ValueError("normal_variance: must be > 0")
        if self.alpha is not None:
            a = tuple(float(x) for x in self.alpha)
            if not all(x > 0 for x in a):
                raise ValueError("alpha: entries must be > 0")
            object.__setattr__(self, "alpha", a)

    def alpha_for(self, K: int) -> np.ndarray:
        if self.alpha is None:
            return np.full(K, 0.01)
        if len(self.alpha) == 1:
            return np.full(K, self.alpha[0])
        if len(self.alpha) != K:
            raise ValueError(f"alpha has {len(self.alpha)} entries, model has K={K}")
        return np.asarray(self.alpha)


# ---------------------------------------------------------------------------
# simplex reparameterisation
# ---------------------------------------------------------------------------


def _log_pi(omega) -> np.ndarray:
    full = np.append(np.asarray(omega, dtype=np.float64).ravel(), 0.0)
    return full - logsumexp(full)


def simplex_forward(omega) -> np.ndarray:
    """Anchored softmax: ``pi_k = e^{omega_k} / (1 + sum e^{omega})``, ``pi_K`` the anchor."""
    omega = np.asarray(omega, dtype=np.float64).ravel()
    if not np.all(np.isfinite(omega)):
        raise ValueError("omega must be finite")
    return np.exp(_log_pi(omega))


def simplex_inverse(pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64).ravel()
    if pi.size < 1 or np.any(pi <= 0):
        raise ValueError("simplex_inverse needs strictly positive weights")
    return np.log(pi[:-1]) - np.log(pi[-1])


def simplex_chain_rule(grad_pi, pi) -> np.ndarray:
    """Pull a gradient w.r.t. ``pi`` back to ``omega`` through the anchored softmax."""
    grad_pi = np.asarray(grad_pi, dtype=np.float64).ravel()
    pi = np.asarray(pi, dtype=np.float64).ravel()
    if grad_pi.size != pi.size:
        raise ValueError(f"gradient has {grad_pi.size} entries, pi has {pi.size}")
    # J[j, k] = d pi_j / d omega_k = pi_j (delta_jk - pi_k), j over all K
    head = pi[:-1]
    return head * grad_pi[:-1] - head * float(np.dot(grad_pi, pi))


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------


def _split_phi(params: ModelParams):
    A = np.concatenate([m.A.ravel() for m in params.maps])
    b = np.concatenate([m.b for m in params.maps])
    return A, b


def log_prior(params: ModelParams, prior: PriorConfig = PriorConfig()) -> float:
    """Laplace on every ``A`` entry, Normal on every ``b`` entry, Dirichlet in ``omega``-space.

    The Dirichlet part is ``sum_k alpha_k log pi_k - log B(alpha)``.
    """
    A, b = _split_phi(params)
    s = prior.laplace_scale
    lp = -A.size * np.log(2.0 * s) - np.abs(A).sum() / s
    var = prior.normal_variance
    lp += -0.5 * b.size * np.log(2.0 * np.pi * var) - 0.5 * np.dot(b, b) / var
    if params.K > 1:
        alpha = prior.alpha_for(params.K)
        logpi = _log_pi(params.omega)
        if np.any(logpi < np.log(PI_FLOOR)):
            log.warning("barycenter weight below %g; clamping in the Dirichlet prior", PI_FLOOR)
            logpi = np.maximum(logpi, np.log(PI_FLOOR))
        log_beta = gammaln(alpha).sum() - gammaln(alpha.sum())
        lp += float(np.dot(alpha, logpi)) - log_beta
    return float(lp)


def log_prior_grad(params: ModelParams, prior: PriorConfig = PriorConfig()):
    """Return ``(grad_phi, grad_omega)`` of :func:`log_prior`."""
    grads = []
    s = prior.laplace_scale
    for m in params.maps:
        grads.append(-np.sign(m.A).ravel() / s)
        grads.append(-m.b / prior.normal_variance)
    grad_phi = np.concatenate(grads)
    if params.K > 1:
        alpha = prior.alpha_for(params.K)
        pi = params.pi
        grad_omega = alpha[:-1] - pi[:-1] * alpha.sum()
    else:
        grad_omega = np.zeros(0)
    return grad_phi, grad_omega


# ---------------------------------------------------------------------------
# push-forwards and the fitted distribution
# ---------------------------------------------------------------------------


def pushforward(lmap: LinearMap, F) -> EmpiricalDistribution:
    X = as_points(F)
    if X.shape[1] != lmap.in_dim:
        raise ValueError(f"predictor has dimension {X.shape[1]}, map expects {lmap.in_dim}")
    return EmpiricalDistribution(lmap(X))


def pushforward_jacobian(lmap: LinearMap, F, offset: int = 0) -> BlockJacobian:
    """``d (A x_j + b) / d (vec(A), b)`` for every atom, in the package layout."""
    X = as_points(F)
    d, h = lmap.A.shape
    M = X.shape[0]
    vals = np.zeros((M, d, d * h + d))
    for r in range(d):
        vals[:, r, r * h : (r + 1) * h] = X
        vals[:, r, d * h + r] = 1.0
    return BlockJacobian(offset, vals, X)


@dataclass
class FittedDistribution:
    atoms: np.ndarray
    jac_phi: Optional[np.ndarray] = None
    jac_pi: Optional[np.ndarray] = None


def _check_obs(params: ModelParams, obs: Observation):
    if obs.K != params.K:
        raise ValueError(f"observation has {obs.K} predictors, model has K={params.K}")
    for k, (F, m) in enumerate(zip(obs.predictors, params.maps)):
        if F.dim != m.in_dim:
            raise ValueError(f"predictor {k} has dimension {F.dim}, map expects {m.in_dim}")
    if obs.response.dim != params.d:
        raise ValueError(f"response has dimension {obs.response.dim}, model has d={params.d}")


def fitted_distribution(
    params: ModelParams,
    obs: Observation,
    cfg: LikelihoodConfig,
    track_phi: bool = False,
    track_pi: bool = False,
    key: Optional[Key] = None,
) -> FittedDistribution:
    """Barycenter of the push-forwarded predictors, optionally with Jacobians."""
    _check_obs(params, obs)
    margs = [pushforward(m, F).points for m, F in zip(params.maps, obs.predictors)]
    jacs = None
    if track_phi:
        offs = params.offsets()
        jacs = [pushforward_jacobian(m, F, o) for m, F, o in zip(params.maps, obs.predictors, offs)]
    swb = cfg.swb
    if swb.p != cfg.p:
        swb = SwbConfig(**{**swb.__dict__, "p": cfg.p})
    res = swb_solve(
        margs, params.pi, swb,
        key=swb.seed if key is None else key,
        pushforward_jacobians=jacs,
        n_phi=params.n_phi if track_phi else None,
        track_pi=track_pi and params.K > 1,
        record_trace=False,
    )
    return FittedDistribution(res.atoms, res.jac_phi, res.jac_pi)


@dataclass
class LikelihoodTerm:
    loglik: float
    grad_phi: Optional[np.ndarray] = None
    grad_pi: Optional[np.ndarray] = None


def observation_term(
    params: ModelParams,
    obs: Observation,
    cfg: LikelihoodConfig,
    key: Key,
    grad_phi: bool = False,
    grad_pi: bool = False,
) -> LikelihoodTerm:
    """Log generalized likelihood of one observation and optionally its gradients.

    ``key`` drives both the solver stream and the evaluation projections
    (``key + (TAG_EVAL,)``), so two parameter values evaluated under the same
    key see identical random directions.
    """
    key = as_key(key)
    fit = fitted_distribution(params, obs, cfg, track_phi=grad_phi, track_pi=grad_pi, key=key)
    Y = obs.response.points
    proj = sample_projections(cfg.L_eval, params.d, key + (TAG_EVAL,))
    if not (grad_phi or grad_pi):
        return LikelihoodTerm(-cfg.w * sw_distance_pp(fit.atoms, Y, proj, cfg.p))
    g = sw_grad_points(fit.atoms, Y, proj, cfg.p)
    loss = sw_distance_pp(fit.atoms, Y, proj, cfg.p)
    term = LikelihoodTerm(-cfg.w * loss)
    if grad_phi:
        term.grad_phi = -cfg.w * np.einsum("md,mdp->p", g, fit.jac_phi)
    if grad_pi:
        if params.K > 1:
            term.grad_pi = -cfg.w * np.einsum("md,mdk->k", g, fit.jac_pi)
        else:
            term.grad_pi = np.zeros(1)
    return term


def gen_log_lik(params: ModelParams, obs: Observation, cfg: LikelihoodConfig, key: Optional[Key] = None) -> float:
    """``-w SW_p^p(fitted, response)`` for one observation."""
    return observation_term(params, obs, cfg, cfg.swb.seed if key is None else key).loglik


def dataset_terms(
    params: ModelParams,
    dataset: Sequence[Observation],
    cfg: LikelihoodConfig,
    key: Key,
    grad_phi: bool = False,
    grad_pi: bool = False,
    threads: int = 1,
) -> LikelihoodTerm:
    """Sum of :func:`observation_term` over a dataset; observation ``i`` uses ``key + (i,)``.

    Terms are evaluated on up to ``threads`` workers and always summed in
    index order.
    """
    key = as_key(key)

    def one(i):
        return observation_term(params, dataset[i], cfg, key + (i,), grad_phi, grad_pi)

    if threads > 1 and len(dataset) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            terms = list(pool.map(one, range(len(dataset))))
    else:
        terms = [one(i) for i in range(len(dataset))]
    total = LikelihoodTerm(0.0)
    if grad_phi:
        total.grad_phi = np.zeros(params.n_phi)
    if grad_pi:
        total.grad_pi = np.zeros(params.K)
    for t in terms:
        total.loglik += t.loglik
        if grad_phi:
            total.grad_phi = total.grad_phi + t.grad_phi
        if grad_pi:
            total.grad_pi = total.grad_pi + t.grad_pi
    return total


# ---------------------------------------------------------------------------
# relative error
# ---------------------------------------------------------------------------


def reference_intercept(dataset: Sequence[Observation]) -> np.ndarray:
    """Pooled mean of every response atom: the best single point mass in ``W_2``."""
    pooled = np.concatenate([obs.response.points for obs in dataset], axis=0)
    return pooled.mean(axis=0)


def reference_distribution(intercepts, p: float = 2.0, cfg: Optional[SwbConfig] = None) -> np.ndarray:
    """Barycenter of the point masses ``delta_{b'_k}`` with uniform weights."""
    B = np.atleast_2d(np.asarray(intercepts, dtype=np.float64))
    if np.allclose(B, B[0]) or p == 2.0:
        # identical masses, or p = 2 where every slice is minimised at the mean
        return B.mean(axis=0, keepdims=True)
    cfg = cfg or SwbConfig(M_G=1, p=p)
    K = B.shape[0]
    return swb_solve([b[None, :] for b in B], np.full(K, 1.0 / K), cfg, record_trace=False).atoms


def relative_error(
    params: ModelParams,
    dataset: Sequence[Observation],
    cfg: LikelihoodConfig,
    reference_intercepts,
    key: Key = 0,
    fitted: Optional[Sequence[np.ndarray]] = None,
) -> float:
    """Mean over observations of ``SW(fitted_i, G_i) / SW(reference_i, G_i)``.

    Evaluation projections for observation ``i`` come from ``key + (i,)``
    and are shared by numerator and denominator.
    """
    key = as_key(key)
    B = np.atleast_2d(np.asarray(reference_intercepts, dtype=np.float64))
    if B.shape[1] != params.d:
        raise ValueError(f"reference intercepts have dimension {B.shape[1]}, model has d={params.d}")
    ref = reference_distribution(B, cfg.p)
    ratios = []
    for i, obs in enumerate(dataset):
        atoms = fitted[i] if fitted is not None else fitted_distribution(params, obs, cfg, key=key + (i,)).atoms
        proj = sample_projections(cfg.L_eval, params.d, key + (i, TAG_EVAL))
        num = sw_distance_pp(atoms, obs.response.points, proj, cfg.p)
        den = sw_distance_pp(ref, obs.response.points, proj, cfg.p)
        if den <= 0.0:
            raise ValueError(f"degenerate reference: zero reference error for observation {i}")
        ratios.append(num / den)
    return float(np.mean(ratios))
