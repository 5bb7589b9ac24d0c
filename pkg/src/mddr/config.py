"""One JSON document configuring every stage of a run.

Layout (all sections and keys optional; omitted values take the defaults)::

    {
      "seed": 0,
      "likelihood": {"w": 10, "p": 2, "L_eval": 1000},
      "swb": {"T": 100, "eta": 0.1, "beta1": 0.9, "beta2": 0.999,
              "epsilon": 1e-8, "M_G": null, "L_solver": 100,
              "jacobian_mode": "exact"},
      "mala": {"eta1": 0.001, "eta2": 0.005, "n_steps": 100,
               "burn_in": 0, "thin": 1},
      "prior": {"laplace_scale": 1, "normal_variance": 1000, "alpha": null},
      "simulation": {"n_obs": 70, "n_atoms": 100,
                     "true_pi": [0.667, 0.167, 0.167], "noise_sd": 0.1,
                     "train_fraction": 0.7, "T": 100},
      "evaluation": {"L_eval": 1000}
    }

The top-level ``seed`` drives every stream. The ground-cost order ``p`` lives
in ``likelihood`` and is copied into the solver settings.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from .barycenter import SwbConfig
from .experiments import SimulationConfig
from .mcmc import MalaConfig
from .model import LikelihoodConfig, PriorConfig


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``path: message`` strings."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config: " + "; ".join(self.errors))


_SWB_KEYS = ("T", "eta", "beta1", "beta2", "epsilon", "M_G", "L_solver", "jacobian_mode")
_SECTIONS = {
    "likelihood": {"w": (int, float), "p": (int, float), "L_eval": (int,)},
    "swb": {
        "T": (int,), "eta": (int, float), "beta1": (int, float), "beta2": (int, float),
        "epsilon": (int, float), "M_G": (int, type(None)), "L_solver": (int,), "jacobian_mode": (str,),
    },
    "mala": {"eta1": (int, float), "eta2": (int, float), "n_steps": (int,), "burn_in": (int,), "thin": (int,)},
    "prior": {"laplace_scale": (int, float), "normal_variance": (int, float), "alpha": (list, int, float, type(None))},
    "simulation": {
        "n_obs": (int,), "n_atoms": (int,), "true_pi": (list,), "noise_sd": (int, float),
        "train_fraction": (int, float), "T": (int,),
    },
    "evaluation": {"L_eval": (int,)},
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    likelihood: LikelihoodConfig = LikelihoodConfig()
    mala: MalaConfig = MalaConfig()
    prior: PriorConfig = PriorConfig()
    simulation: SimulationConfig = SimulationConfig()
    eval_L: int = 1000
    raw: Mapping = field(default_factory=dict, compare=False)

    @property
    def swb(self) -> SwbConfig:
        return self.likelihood.swb

    def eval_likelihood(self) -> LikelihoodConfig:
        """Likelihood settings with the evaluation projection count."""
        return dataclasses.replace(self.likelihood, L_eval=self.eval_L)

    def with_seed(self, seed: int) -> "RunConfig":
        doc = dict(self.raw)
        doc["seed"] = int(seed)
        return RunConfig.from_dict(doc)

    def to_dict(self) -> dict:
        """Fully resolved document; feeding it back gives an identical config."""
        swb = self.swb
        alpha = self.prior.alpha
        return {
            "seed": self.seed,
            "likelihood": {"w": self.likelihood.w, "p": self.likelihood.p, "L_eval": self.likelihood.L_eval},
            "swb": {k: getattr(swb, k) for k in _SWB_KEYS},
            "mala": {k: getattr(self.mala, k) for k in ("eta1", "eta2", "n_steps", "burn_in", "thin")},
            "prior": {
                "laplace_scale": self.prior.laplace_scale,
                "normal_variance": self.prior.normal_variance,
                "alpha": None if alpha is None else list(alpha),
            },
            "simulation": {
                "n_obs": self.simulation.n_obs,
                "n_atoms": self.simulation.n_atoms,
                "true_pi": [float(x) for x in self.simulation.true_pi],
                "noise_sd": self.simulation.noise_sd,
                "train_fraction": self.simulation.train_fraction,
                "T": self.simulation.swb.T,
            },
            "evaluation": {"L_eval": self.eval_L},
        }

    @classmethod
    def from_dict(cls, doc: Any) -> "RunConfig":
        errors = []
        if not isinstance(doc, Mapping):
            raise ConfigError(["<root>: must be a JSON object"])
        for key in doc:
            if key != "seed" and key not in _SECTIONS:
                errors.append(f"{key}: unknown section")
        seed = doc.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            errors.append("seed: must be a non-negative integer")
            seed = 0
        sections = {}
        for name, schema in _SECTIONS.items():
            sec = doc.get(name, {})
            if not isinstance(sec, Mapping):
                errors.append(f"{name}: must be an object")
                sec = {}
            clean = {}
            for key, value in sec.items():
                if key not in schema:
                    errors.append(f"{name}.{key}: unknown field")
                elif isinstance(value, bool) or not isinstance(value, schema[key]):
                    kinds = "/".join("null" if t is type(None) else t.__name__ for t in schema[key])
                    errors.append(f"{name}.{key}: expected {kinds}, got {type(value).__name__}")
                else:
                    clean[key] = value
            sections[name] = clean
        if errors:
            raise ConfigError(errors)

        lk = sections["likelihood"]
        p = float(lk.get("p", 2.0))
        swb = _build("swb", SwbConfig, {**sections["swb"], "p": p, "seed": seed}, errors)
        lik = None
        if swb is not None:
            lik = _build("likelihood", LikelihoodConfig, {**lk, "swb": swb}, errors)
        mala = _build("mala", MalaConfig, {**sections["mala"], "seed": seed}, errors)
        pr = dict(sections["prior"])
        if isinstance(pr.get("alpha"), (int, float)):
            pr["alpha"] = (pr["alpha"],)
        elif isinstance(pr.get("alpha"), list):
            pr["alpha"] = tuple(pr["alpha"])
        prior = _build("prior", PriorConfig, pr, errors)
        sim_raw = dict(sections["simulation"])
        sim_T = sim_raw.pop("T", SwbConfig().T)
        if "true_pi" in sim_raw:
            sim_raw["true_pi"] = tuple(sim_raw["true_pi"])
        sim_swb = _build("simulation", SwbConfig, {"T": sim_T, "p": p, "seed": seed}, errors)
        sim = None
        if sim_swb is not None:
            sim = _build("simulation", SimulationConfig, {**sim_raw, "seed": seed, "swb": sim_swb}, errors)
        eval_L = sections["evaluation"].get("L_eval", 1000)
        if eval_L < 1:
            errors.append("evaluation.L_eval: must be >= 1")
        if errors:
            raise ConfigError(errors)
        return cls(seed, lik, mala, prior, sim, eval_L, raw=dict(doc))

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError([f"{path}: {exc.strerror or exc}"]) from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})"]) from exc
        return cls.from_dict(doc)


def _build(section: str, factory, kwargs: dict, errors: list) -> Optional[Any]:
    try:
        return factory(**kwargs)
    except (ValueError, TypeError) as exc:
        for part in str(exc).split("; "):
            errors.append(f"{section}.{part}")
        return None


def load_config(path: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    """Load ``path`` (or the defaults) and apply a seed override."""
    cfg = RunConfig.load(path) if path else RunConfig()
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg
