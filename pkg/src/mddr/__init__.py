"""Bayesian multiple multivariate density-density regression.

Responses and predictors are point clouds. A fitted response is the sliced
Wasserstein barycenter of linear pushforwards of the predictors, and the
regression coefficients and barycenter weights are sampled with MALA under a
generalized likelihood built from the sliced Wasserstein distance.
"""

__version__ = "0.1.0"

from .barycenter import BarycenterState, DivergenceError, SwbConfig, SwbResult, swb_grad_support, swb_objective, swb_solve
from .mcmc import (
    ChainSample,
    GeneralizedPosterior,
    MalaConfig,
    grad_log_post_omega,
    grad_log_post_phi,
    hpd_interval,
    run_chain,
    summarize,
)
from .model import (
    LikelihoodConfig,
    LinearMap,
    ModelParams,
    Observation,
    PriorConfig,
    fitted_distribution,
    gen_log_lik,
    log_prior,
    log_prior_grad,
    relative_error,
    simplex_chain_rule,
)
from .sliced import (
    EmpiricalDistribution,
    ProjectionSet,
    TransportPlan1D,
    sample_projections,
    sw_distance_pp,
    sw_grad_points,
    transport_plan_1d,
    wasserstein_1d_pp,
)

__all__ = [
    "BarycenterState",
    "ChainSample",
    "DivergenceError",
    "EmpiricalDistribution",
    "GeneralizedPosterior",
    "LikelihoodConfig",
    "LinearMap",
    "MalaConfig",
    "ModelParams",
    "Observation",
    "PriorConfig",
    "ProjectionSet",
    "SwbConfig",
    "SwbResult",
    "TransportPlan1D",
    "fitted_distribution",
    "gen_log_lik",
    "grad_log_post_omega",
    "grad_log_post_phi",
    "hpd_interval",
    "log_prior",
    "log_prior_grad",
    "relative_error",
    "run_chain",
    "sample_projections",
    "simplex_chain_rule",
    "summarize",
    "sw_distance_pp",
    "sw_grad_points",
    "swb_grad_support",
    "swb_objective",
    "swb_solve",
    "transport_plan_1d",
    "wasserstein_1d_pp",
]
