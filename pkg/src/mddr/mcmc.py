"""Metropolis-adjusted Langevin sampling of the generalized posterior.

Each chain iteration makes one MALA move on the regression coefficients
``phi`` and then one on the unconstrained weights ``omega``. Every state
scored during an iteration uses the same likelihood stream, keyed by
``(seed, step)``, so each Metropolis ratio compares like with like. Because
the stream is shared, the state reached by the ``phi`` move is reused as the
starting point of the ``omega`` move without another solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .barycenter import DivergenceError
from .model import (
    LikelihoodConfig,
    ModelParams,
    Observation,
    PriorConfig,
    dataset_terms,
    log_prior,
    log_prior_grad,
    simplex_chain_rule,
    unflatten_phi,
)
from .rng import TAG_INIT_PARAMS, TAG_LIKELIHOOD, TAG_MALA, stream

PHI, OMEGA, BOTH = 0, 1, 2


@dataclass(frozen=True)
class MalaConfig:
    eta1: float = 1e-3
    eta2: float = 5e-3
    n_steps: int = 100
    burn_in: int = 0
    thin: int = 1
    seed: int = 0

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ValueError("; ".join(errors))

    def problems(self) -> list[str]:
        out = []
        if not self.eta1 > 0:
            out.append("eta1: must be > 0")
        if not self.eta2 > 0:
            out.append("eta2: must be > 0")
        if not self.n_steps >= 1:
            out.append("n_steps: must be >= 1")
        if not 0 <= self.burn_in < self.n_steps:
            out.append("burn_in: must satisfy 0 <= burn_in < n_steps")
        if not self.thin >= 1:
            out.append("thin: must be >= 1")
        return out


@dataclass(frozen=True)
class ChainSample:
    params: ModelParams
    log_post: float
    accepted_phi: bool
    accepted_omega: bool
    step: int

    def to_record(self) -> dict:
        return {
            "step": int(self.step),
            "log_post": float(self.log_post),
            "accepted_phi": bool(self.accepted_phi),
            "accepted_omega": bool(self.accepted_omega),
            "pi": [float(x) for x in self.params.pi],
            "phi": [float(x) for x in self.params.phi],
        }

    @classmethod
    def from_record(cls, rec: dict, d: int, in_dims: Sequence[int]) -> "ChainSample":
        pi = np.asarray(rec["pi"], dtype=np.float64)
        if pi.size != len(in_dims):
            raise ValueError(f"chain record has {pi.size} weights but the layout has K={len(in_dims)}")
        # omega is recovered from pi; exact up to rounding of the stored weights
        with np.errstate(divide="ignore"):
            omega = np.log(pi[:-1]) - np.log(pi[-1])
        maps = unflatten_phi(rec["phi"], d, in_dims)
        return cls(ModelParams(maps, omega), float(rec["log_post"]), bool(rec["accepted_phi"]),
                   bool(rec["accepted_omega"]), int(rec["step"]))


class ChainError(RuntimeError):
    """A chain step failed; ``samples`` holds everything recorded before it."""

    def __init__(self, message: str, step: int, samples: list):
        super().__init__(f"{message} (step {step})")
        self.step = step
        self.samples = samples


@dataclass
class GeneralizedPosterior:
    """Prior times generalized likelihood over a fixed dataset."""

    dataset: Sequence[Observation]
    lik: LikelihoodConfig
    prior: PriorConfig = PriorConfig()
    seed: int = 0
    threads: int = 1

    cache_size: int = 4

    def __post_init__(self):
        self._cache: dict = {}

    def key(self, step: int):
        return (self.seed, TAG_LIKELIHOOD, step)

    def _lookup(self, ident, need_phi, need_omega):
        hit = self._cache.get(ident)
        if hit is None:
            return None
        lp, gphi, gomega = hit
        if (need_phi and gphi is None) or (need_omega and gomega is None):
            return None
        return hit

    def evaluate(self, params: ModelParams, key, which: Optional[int] = None):
        """Log posterior and, if ``which`` is set, its gradient.

        ``which`` is ``PHI``, ``OMEGA`` or ``BOTH``; with ``BOTH`` the
        gradient is returned as a ``(grad_phi, grad_omega)`` pair. Recent
        results are memoised by state and stream key.
        """
        need_phi = which in (PHI, BOTH)
        need_omega = which in (OMEGA, BOTH) and params.K > 1
        ident = (tuple(key) if isinstance(key, (tuple, list)) else key,
                 params.phi.tobytes(), np.asarray(params.omega, dtype=np.float64).tobytes())
        hit = self._lookup(ident, need_phi, need_omega)
        if hit is None:
            term = dataset_terms(
                params, self.dataset, self.lik, key,
                grad_phi=need_phi, grad_pi=need_omega, threads=self.threads,
            )
            lp = log_prior(params, self.prior) + term.loglik
            gphi = gomega = None
            if need_phi or need_omega:
                prior_phi, prior_omega = log_prior_grad(params, self.prior)
                if need_phi:
                    gphi = prior_phi + term.grad_phi
                if need_omega:
                    gomega = prior_omega + simplex_chain_rule(term.grad_pi, params.pi)
            hit = (lp, gphi, gomega)
            if len(self._cache) >= self.cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[ident] = hit
        lp, gphi, gomega = hit
        if params.K == 1 and which in (OMEGA, BOTH):
            gomega = np.zeros(0)
        if which is None:
            return lp, None
        if which == PHI:
            return lp, gphi
        if which == OMEGA:
            return lp, gomega
        return lp, (gphi, gomega)


def grad_log_post_phi(params, dataset, cfg: LikelihoodConfig, prior: PriorConfig = PriorConfig(), key=0, threads=1):
    """Gradient of the log generalized posterior w.r.t. ``phi``."""
    post = GeneralizedPosterior(dataset, cfg, prior, threads=threads)
    return post.evaluate(params, key, PHI)[1]


def grad_log_post_omega(params, dataset, cfg: LikelihoodConfig, prior: PriorConfig = PriorConfig(), key=0, threads=1):
    """Gradient of the log generalized posterior w.r.t. ``omega`` (length ``K-1``)."""
    post = GeneralizedPosterior(dataset, cfg, prior, threads=threads)
    return post.evaluate(params, key, OMEGA)[1]


@dataclass
class MalaMove:
    x: np.ndarray
    log_post: float
    accepted: bool
    log_ratio: float


def mala_move(x, log_density: Callable, eta: float, rng: np.random.Generator, xi=None) -> MalaMove:
    """One MALA transition for a flat vector ``x``.

    ``log_density(x)`` returns ``(log p(x), grad log p(x))``. A proposal
    whose density is not finite (or whose evaluation diverges) is rejected.
    """
    x = np.asarray(x, dtype=np.float64)
    lp0, g0 = log_density(x)
    if xi is None:
        xi = rng.standard_normal(x.size)
    prop = x + eta * g0 + math.sqrt(2.0 * eta) * xi
    u = rng.random()
    try:
        lp1, g1 = log_density(prop)
    except (DivergenceError, FloatingPointError):
        return MalaMove(x, lp0, False, -np.inf)
    if not (np.isfinite(lp1) and np.all(np.isfinite(g1))):
        return MalaMove(x, lp0, False, -np.inf)
    fwd = -np.sum((prop - x - eta * g0) ** 2) / (4.0 * eta)
    rev = -np.sum((x - prop - eta * g1) ** 2) / (4.0 * eta)
    log_ratio = lp1 - lp0 + rev - fwd
    if log_ratio >= 0.0 or math.log(u) < log_ratio:
        return MalaMove(prop, lp1, True, log_ratio)
    return MalaMove(x, lp0, False, log_ratio)


def mala_step(current: ChainSample, which: int, posterior: GeneralizedPosterior, mala: MalaConfig, step: int):
    """MALA move on one block; returns ``(ChainSample, accepted)``."""
    params = current.params
    rng = stream((mala.seed, TAG_MALA, step, which))
    key = posterior.key(step)
    if which == PHI:
        # score both blocks so the omega move can start from the cache
        block = BOTH if params.K > 1 else PHI

        def density(phi):
            lp, g = posterior.evaluate(params.with_phi(phi), key, block)
            return lp, g[0] if block == BOTH else g
        move = mala_move(params.phi, density, mala.eta1, rng)
        new = params.with_phi(move.x) if move.accepted else params
    else:
        def density(omega):
            return posterior.evaluate(params.with_omega(omega), key, OMEGA)
        move = mala_move(params.omega, density, mala.eta2, rng)
        new = params.with_omega(move.x) if move.accepted else params
    if not np.isfinite(move.log_post):
        raise FloatingPointError("current state has non-finite log posterior")
    flags = dict(accepted_phi=current.accepted_phi, accepted_omega=current.accepted_omega)
    flags["accepted_phi" if which == PHI else "accepted_omega"] = move.accepted
    return ChainSample(new, float(move.log_post), step=step, **flags), move.accepted


def init_params(d: int, in_dims: Sequence[int], prior: PriorConfig = PriorConfig(), seed: int = 0,
                scale: float = 0.1) -> ModelParams:
    """Prior draw shrunk by ``scale``, with uniform weights."""
    from .model import LinearMap

    rng = stream((seed, TAG_INIT_PARAMS))
    maps = []
    for h in in_dims:
        A = rng.laplace(0.0, prior.laplace_scale, size=(d, h)) * scale
        b = rng.normal(0.0, math.sqrt(prior.normal_variance), size=d) * scale
        maps.append(LinearMap(A, b))
    return ModelParams(tuple(maps), np.zeros(len(in_dims) - 1))


def run_chain(
    posterior: GeneralizedPosterior,
    init: ModelParams,
    mala: MalaConfig,
    on_sample: Optional[Callable[[ChainSample], None]] = None,
) -> list[ChainSample]:
    """Alternate a ``phi`` move and an ``omega`` move for ``mala.n_steps`` iterations.

    Samples after burn-in are kept every ``mala.thin`` steps. On failure a
    :class:`ChainError` carries the samples recorded so far.
    """
    samples: list[ChainSample] = []
    state = ChainSample(init, float("nan"), False, False, -1)
    for step in range(mala.n_steps):
        try:
            state, _ = mala_step(state, PHI, posterior, mala, step)
            if init.K > 1:
                state, _ = mala_step(state, OMEGA, posterior, mala, step)
            else:
                state = ChainSample(state.params, state.log_post, state.accepted_phi, False, step)
        except (FloatingPointError, ValueError) as exc:
            raise ChainError(str(exc), step, samples) from exc
        if step >= mala.burn_in and (step - mala.burn_in) % mala.thin == 0:
            samples.append(state)
            if on_sample is not None:
                on_sample(state)
    return samples


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


def hpd_interval(values, mass: float = 0.95):
    """Shortest window of sorted draws holding ``ceil(mass * n)`` of them."""
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = x.size
    k = int(math.ceil(mass * n - 1e-12))
    k = min(max(k, 1), n)
    widths = x[k - 1 :] - x[: n - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


def summarize(chain, functional="weights", mass: float = 0.95, min_samples: int = 20):
    """Posterior mean and HPD interval of a scalar or vector functional.

    ``functional`` is ``"weights"``, ``"coefficient"``, a callable of a
    :class:`ChainSample`, or an array of draws (rows are samples). For vector
    functionals intervals are per coordinate. Returns ``(mean, (lo, hi))``.
    """
    if isinstance(functional, str) and functional == "weights":
        draws = np.array([s.params.pi for s in chain])
    elif isinstance(functional, str) and functional == "coefficient":
        draws = np.array([s.params.phi for s in chain])
    elif callable(functional):
        draws = np.array([functional(s) for s in chain], dtype=np.float64)
    elif isinstance(functional, str):
        raise ValueError(f"unknown functional {functional!r}")
    else:
        draws = np.asarray(functional if functional is not None else chain, dtype=np.float64)
    if draws.shape[0] < min_samples:
        raise ValueError(f"need at least {min_samples} samples for an HPD interval, got {draws.shape[0]}")
    mean = draws.mean(axis=0)
    if draws.ndim == 1:
        return float(mean), hpd_interval(draws, mass)
    lo, hi = zip(*(hpd_interval(draws[:, j], mass) for j in range(draws.shape[1])))
    return mean, (np.array(lo), np.array(hi))
