"""Simulation study, single-predictor baseline, evaluation and communication graphs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .barycenter import SwbConfig, swb_solve
from .mcmc import ChainSample, GeneralizedPosterior, MalaConfig, hpd_interval, init_params, run_chain
from .model import (
    LikelihoodConfig,
    LinearMap,
    ModelParams,
    Observation,
    PriorConfig,
    fitted_distribution,
    gen_log_lik,
    reference_distribution,
    reference_intercept,
)
from .rng import TAG_EVAL, TAG_SIMULATE, as_key, stream
from .sliced import EmpiricalDistribution, sample_projections, sw_distance_pp


@dataclass(frozen=True)
class SimulationConfig:
    n_obs: int = 70
    n_atoms: int = 100
    true_pi: tuple = (2 / 3, 1 / 6, 1 / 6)
    noise_sd: float = 0.1
    train_fraction: float = 0.7
    seed: int = 0
    swb: SwbConfig = SwbConfig()

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ValueError("; ".join(errors))

    def problems(self) -> list[str]:
        out = []
        if not self.n_obs >= 1:
            out.append("n_obs: must be >= 1")
        if not self.n_atoms >= 1:
            out.append("n_atoms: must be >= 1")
        pi = np.asarray(self.true_pi, dtype=np.float64)
        if pi.ndim != 1 or pi.size < 1 or np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-9:
            out.append("true_pi: must be a probability vector")
        if not self.noise_sd >= 0:
            out.append("noise_sd: must be >= 0")
        if not 0 < self.train_fraction <= 1:
            out.append("train_fraction: must be in (0, 1]")
        return out


@dataclass
class SimulatedData:
    train: list
    test: list
    truth: ModelParams
    train_index: np.ndarray
    test_index: np.ndarray


def n_train(n_obs: int, fraction: float) -> int:
    return int(math.floor(fraction * n_obs + 0.5 + 1e-9))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation by a uniform angle; the Haar draw on SO(2)."""
    a = rng.uniform(0.0, 2.0 * math.pi)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


def simulate_dataset(cfg: SimulationConfig = SimulationConfig()) -> SimulatedData:
    """Bivariate responses built as barycenters of rotated, lifted 1-D Gaussians.

    Per observation and predictor: direction ``v`` uniform on the circle,
    ``mu ~ N(0, 9)``, ``sigma^2 ~ InvGamma(3, 1)``; atoms are ``v x`` with
    ``x ~ N(mu, sigma^2)``. The response is the barycenter of ``A_k``-rotated
    predictors at ``true_pi`` plus isotropic Gaussian noise per atom.
    """
    true_pi = np.asarray(cfg.true_pi, dtype=np.float64)
    K = true_pi.size
    base = (cfg.seed, TAG_SIMULATE)
    rots = [random_rotation(stream(base, 0, k)) for k in range(K)]
    truth_maps = tuple(LinearMap(A, np.zeros(2)) for A in rots)
    swb = SwbConfig(**{**cfg.swb.__dict__, "M_G": cfg.n_atoms})

    observations = []
    for i in range(cfg.n_obs):
        rng = stream(base, 1, i)
        preds = []
        for _ in range(K):
            ang = rng.uniform(0.0, 2.0 * math.pi)
            v = np.array([math.cos(ang), math.sin(ang)])
            mu = rng.normal(0.0, 3.0)
            var = 1.0 / rng.gamma(3.0, 1.0)
            x = rng.normal(mu, math.sqrt(var), size=cfg.n_atoms)
            preds.append(x[:, None] * v[None, :])
        margs = [p @ A.T for p, A in zip(preds, rots)]
        bary = swb_solve(margs, true_pi, swb, key=base + (2, i), record_trace=False).atoms
        noise = rng.normal(0.0, cfg.noise_sd, size=bary.shape) if cfg.noise_sd > 0 else 0.0
        observations.append(Observation(tuple(preds), EmpiricalDistribution(bary + noise)))

    order = stream(base, 3).permutation(cfg.n_obs)
    nt = n_train(cfg.n_obs, cfg.train_fraction)
    tr, te = np.sort(order[:nt]), np.sort(order[nt:])
    return SimulatedData(
        train=[observations[i] for i in tr],
        test=[observations[i] for i in te],
        truth=ModelParams(truth_maps, np.log(np.maximum(true_pi[:-1], 1e-300)) - math.log(max(true_pi[-1], 1e-300))),
        train_index=tr,
        test_index=te,
    )


# ---------------------------------------------------------------------------
# fitting and evaluation
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    chain: list
    predictors: tuple
    metrics: Optional[dict] = None


def fit(
    train: Sequence[Observation],
    lik: LikelihoodConfig,
    prior: PriorConfig,
    mala: MalaConfig,
    predictors: Optional[Sequence[int]] = None,
    threads: int = 1,
    init: Optional[ModelParams] = None,
) -> FitResult:
    """Run the MALA chain on ``train``, optionally restricted to some predictors."""
    which = tuple(range(train[0].K)) if predictors is None else tuple(predictors)
    data = [obs.restrict(which) for obs in train]
    d = data[0].response.dim
    if init is None:
        init = init_params(d, [F.dim for F in data[0].predictors], prior, mala.seed)
    post = GeneralizedPosterior(data, lik, prior, seed=mala.seed, threads=threads)
    return FitResult(run_chain(post, init, mala), which)


def ddr_baseline(train, test, lik, prior, mala, predictor: int = 0, threads: int = 1, eval_cfg=None) -> FitResult:
    """Single-predictor model (``K = 1``, weight fixed at 1) with train/test RE."""
    res = fit(train, lik, prior, mala, predictors=(predictor,), threads=threads)
    res.metrics = evaluate(res.chain, train, test, eval_cfg or lik, predictors=res.predictors,
                           seed=mala.seed, threads=threads)
    return res


def _re_per_sample(chain, data, cfg, ref, seed, split_tag, threads):
    """Per-sample RE plus the pooled fitted atoms for each observation."""
    from concurrent.futures import ThreadPoolExecutor

    d = data[0].response.dim
    projs = [sample_projections(cfg.L_eval, d, (seed, TAG_EVAL, split_tag, i)) for i in range(len(data))]
    dens = []
    for i, obs in enumerate(data):
        den = sw_distance_pp(ref, obs.response.points, projs[i], cfg.p)
        if den <= 0.0:
            raise ValueError(f"degenerate reference: zero reference error for observation {i}")
        dens.append(den)

    def one(pair):
        s, i = pair
        atoms = fitted_distribution(chain[s].params, data[i], cfg, key=(seed, TAG_EVAL, split_tag, s, i)).atoms
        return atoms, sw_distance_pp(atoms, data[i].response.points, projs[i], cfg.p) / dens[i]

    jobs = [(s, i) for s in range(len(chain)) for i in range(len(data))]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(one, jobs))
    else:
        out = [one(j) for j in jobs]
    ratios = np.array([r for _, r in out]).reshape(len(chain), len(data))
    pooled = [np.concatenate([out[s * len(data) + i][0] for s in range(len(chain))]) for i in range(len(data))]
    return ratios.mean(axis=1), pooled


def _summary(values) -> dict:
    values = np.asarray(values, dtype=np.float64)
    out = {"mean": float(values.mean()), "per_sample": [float(v) for v in values]}
    if values.size >= 2:
        lo, hi = hpd_interval(values, 0.95)
        out["hpd95"] = [lo, hi]
    return out


def evaluate(
    chain: Sequence[ChainSample],
    train: Sequence[Observation],
    test: Sequence[Observation],
    cfg: LikelihoodConfig,
    predictors: Optional[Sequence[int]] = None,
    seed: int = 0,
    threads: int = 1,
    reference: Optional[np.ndarray] = None,
    keep_fitted: bool = False,
    include_train: bool = True,
) -> dict:
    """Train/test relative error of every chain sample, with means and 95% HPD intervals.

    The reference intercept is the pooled mean of the training responses.
    HPD intervals are over per-sample RE values. With ``keep_fitted`` the
    pooled fitted atoms of every observation (all samples concatenated) are
    returned under ``"fitted"``. ``include_train=False`` skips the
    training-split RE (the reference intercept still comes from ``train``).
    """
    if not chain:
        raise ValueError("cannot evaluate an empty chain")
    which = tuple(range(train[0].K)) if predictors is None else tuple(predictors)
    tr = [o.restrict(which) for o in train]
    te = [o.restrict(which) for o in test]
    b_ref = reference_intercept(train) if reference is None else np.asarray(reference, dtype=np.float64)
    ref = reference_distribution(b_ref[None, :], cfg.p)
    record = {
        "reference_intercept": [float(x) for x in b_ref],
        "predictors": [int(k) for k in which],
        "n_samples": len(chain),
        "L_eval": int(cfg.L_eval),
    }
    fitted = {}
    if include_train:
        re_tr, fitted["train"] = _re_per_sample(chain, tr, cfg, ref, seed, 0, threads)
        record["train_re"] = _summary(re_tr)
    if te:
        re_te, fitted["test"] = _re_per_sample(chain, te, cfg, ref, seed, 1, threads)
        record["test_re"] = _summary(re_te)
    pis = np.array([s.params.pi for s in chain])
    record["weights"] = {"mean": [float(x) for x in pis.mean(axis=0)]}
    if len(chain) >= 2:
        bounds = [hpd_interval(pis[:, k]) for k in range(pis.shape[1])]
        record["weights"]["hpd95"] = [[lo for lo, _ in bounds], [hi for _, hi in bounds]]
    acc = [s.accepted_phi for s in chain]
    record["acceptance_phi"] = float(np.mean(acc))
    if pis.shape[1] > 1:
        record["acceptance_omega"] = float(np.mean([s.accepted_omega for s in chain]))
    if keep_fitted:
        record["fitted"] = fitted
    return record


def plugin_likelihood_gap(
    params: ModelParams,
    full: Observation,
    cfg: LikelihoodConfig,
    sizes: Sequence[int] = (25, 100, 400),
    n_draws: int = 20,
    seed: int = 0,
) -> dict:
    """Mean ``|lik(n) - lik(full)|`` when every cloud is subsampled to ``n`` atoms.

    ``full`` holds large samples standing in for the underlying continuous
    distributions. Each draw subsamples predictors and response without
    replacement; the evaluation projections are shared by all evaluations.
    Returns ``{n: mean absolute gap}`` plus the full-sample value under ``"full"``.
    """
    key = (seed, TAG_EVAL, 7)
    ref = gen_log_lik(params, full, cfg, key=key)
    out = {"full": ref}
    for n in sizes:
        gaps = []
        for r in range(n_draws):
            rng = stream(key, int(n), r)
            preds = tuple(F.points[rng.choice(F.n_atoms, size=n, replace=False)] for F in full.predictors)
            resp = full.response.points[rng.choice(full.response.n_atoms, size=n, replace=False)]
            gaps.append(abs(gen_log_lik(params, Observation(preds, resp), cfg, key=key) - ref))
        out[int(n)] = float(np.mean(gaps))
    return out


# ---------------------------------------------------------------------------
# communication graph
# ---------------------------------------------------------------------------


@dataclass
class GraphSpec:
    nodes: list
    edges: list  # (source, target, weight)
    threshold: float = 0.0

    def sparse(self, threshold: float) -> "GraphSpec":
        return GraphSpec(list(self.nodes), [e for e in self.edges if e[2] > threshold], threshold)

    def incoming(self, target) -> dict:
        return {s: w for s, t, w in self.edges if t == target}

    def to_csv(self) -> str:
        lines = ["source,target,weight"]
        lines += [f"{s},{t},{repr(float(w))}" for s, t, w in self.edges]
        return "\n".join(lines) + "\n"

    def to_dot(self, name: str = "communication") -> str:
        lines = [f"digraph {name} {{"]
        lines += [f'  "{n}";' for n in self.nodes]
        lines += [f'  "{s}" -> "{t}" [weight={float(w):.6g}, label="{float(w):.3f}"];' for s, t, w in self.edges]
        lines.append("}")
        return "\n".join(lines) + "\n"


def build_graph(
    per_target: Mapping[str, tuple],
    threshold: float = 0.0,
    nodes: Optional[Sequence[str]] = None,
) -> GraphSpec:
    """Weighted graph from per-target posterior-mean barycenter weights.

    ``per_target[target] = (source_labels, chain_or_weights)`` where the
    second item is a chain of :class:`ChainSample` or a weight vector.
    Edges with weight ``<= threshold`` are dropped.
    """
    edges = []
    labels = list(nodes) if nodes is not None else []
    for target, (sources, draws) in per_target.items():
        if len(draws) and isinstance(draws[0], ChainSample):
            w = np.mean([s.params.pi for s in draws], axis=0)
        else:
            w = np.asarray(draws, dtype=np.float64)
        sources = list(sources)
        if len(sources) != w.size:
            raise ValueError(f"target {target!r}: {len(sources)} source labels but {w.size} weights")
        if target in sources:
            raise ValueError(f"target {target!r} listed among its own sources")
        for lab in [target, *sources]:
            if nodes is not None and lab not in labels:
                raise ValueError(f"label {lab!r} is not a known node")
            if lab not in labels:
                labels.append(lab)
        edges.extend((s, target, float(x)) for s, x in zip(sources, w))
    full = GraphSpec(labels, edges, 0.0)
    return full.sparse(threshold) if threshold > 0 else full


# ---------------------------------------------------------------------------
# synthetic stand-in for the cell-communication data
# ---------------------------------------------------------------------------


CELL_TYPES = ("T_cells", "B_cells", "NK_cells", "Monocytes")
# (response, predictors) for the four regression problems
CELL_TASKS = (
    ("T_cells", ("Monocytes", "NK_cells", "B_cells")),
    ("B_cells", ("T_cells", "Monocytes", "NK_cells")),
    ("NK_cells", ("B_cells", "T_cells", "Monocytes")),
    ("Monocytes", ("NK_cells", "B_cells", "T_cells")),
)


@dataclass(frozen=True)
class CellStandInConfig:
    n_donors: int = 75
    n_cells: int = 90
    ligand_dims: Mapping = field(default_factory=lambda: {"T_cells": 4, "B_cells": 7, "NK_cells": 5, "Monocytes": 6})
    receptor_dims: Mapping = field(default_factory=lambda: {"T_cells": 20, "B_cells": 21, "NK_cells": 21, "Monocytes": 14})
    noise_sd: float = 0.1
    train_fraction: float = 0.7
    seed: int = 0
    swb: SwbConfig = SwbConfig(T=30)


def cell_stand_in(cfg: CellStandInConfig = CellStandInConfig()) -> dict:
    """Donor-level ligand/receptor clouds shaped like the four communication tasks.

    Each donor contributes a ligand cloud per cell type (Gaussian with
    donor-specific mean and scale) and, for every task, a receptor cloud that
    is the barycenter of random linear images of the sender clouds at hidden
    weights, plus noise. Returns ``{response: {"sources", "train", "test",
    "true_pi"}}``.
    """
    base = (cfg.seed, TAG_SIMULATE, 99)
    ligands = {}
    for c, ct in enumerate(CELL_TYPES):
        h = cfg.ligand_dims[ct]
        clouds = []
        for i in range(cfg.n_donors):
            rng = stream(base, 0, c, i)
            mu = rng.normal(0.0, 1.0, size=h)
            scale = np.sqrt(1.0 / rng.gamma(3.0, 1.0, size=h))
            clouds.append(mu + scale * rng.standard_normal((cfg.n_cells, h)))
        ligands[ct] = clouds
    order = stream(base, 1).permutation(cfg.n_donors)
    nt = n_train(cfg.n_donors, cfg.train_fraction)
    tr, te = np.sort(order[:nt]), np.sort(order[nt:])
    out = {}
    for t, (resp, sources) in enumerate(CELL_TASKS):
        rng = stream(base, 2, t)
        d = cfg.receptor_dims[resp]
        true_pi = rng.dirichlet(np.ones(len(sources)))
        maps = [rng.normal(0.0, 1.0 / math.sqrt(cfg.ligand_dims[s]), size=(d, cfg.ligand_dims[s])) for s in sources]
        swb = SwbConfig(**{**cfg.swb.__dict__, "M_G": cfg.n_cells})
        obs = []
        for i in range(cfg.n_donors):
            preds = [ligands[s][i] for s in sources]
            margs = [P @ A.T for P, A in zip(preds, maps)]
            bary = swb_solve(margs, true_pi, swb, key=base + (3, t, i), record_trace=False).atoms
            noise = stream(base, 4, t, i).normal(0.0, cfg.noise_sd, size=bary.shape)
            obs.append(Observation(tuple(preds), EmpiricalDistribution(bary + noise)))
        out[resp] = {
            "sources": sources,
            "train": [obs[i] for i in tr],
            "test": [obs[i] for i in te],
            "true_pi": true_pi,
        }
    return out
