"""Command-line entry point: ``mddr {simulate,fit,evaluate,graph,swb}``.

Exit status is 0 on success, 2 for invalid input (config, data, flags) and
3 for numerical failures in the solver or the sampler.
"""

from __future__ import annotations

import argparse
import json
import math
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, kernels
from .barycenter import DivergenceError, SwbConfig, swb_solve
from .config import ConfigError, RunConfig, load_config
from .data import (
    DatasetError,
    atomic_write_json,
    atomic_write_text,
    atoms_to_csv,
    load_dataset,
    read_atoms,
    save_dataset,
)
from .experiments import build_graph, evaluate, simulate_dataset
from .mcmc import ChainError, ChainSample, GeneralizedPosterior, init_params, run_chain

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _versions() -> dict:
    import scipy

    out = {"mddr": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}
    if kernels.HAVE_NUMBA:
        out["numba"] = kernels.numba.__version__
    return out


def _parse_predictors(text: Optional[str], K: int) -> tuple:
    if text is None:
        return tuple(range(K))
    try:
        which = tuple(int(t) for t in text.split(",") if t.strip() != "")
    except ValueError as exc:
        raise UsageError(f"--predictors: expected comma-separated integers, got {text!r}") from exc
    if not which or len(set(which)) != len(which) or not all(0 <= k < K for k in which):
        raise UsageError(f"--predictors: need distinct indices in [0, {K}), got {text!r}")
    return which


def _check_threads(n: int) -> int:
    if n < 1:
        raise UsageError("--threads: must be >= 1")
    return n


def read_chain(path, d: int, in_dims: Sequence[int]) -> list:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"{path}: chain file not found")
    n_phi = sum(d * h + d for h in in_dims)
    samples = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{n}: not valid JSON") from exc
        if len(rec.get("phi", ())) != n_phi:
            raise DatasetError(
                f"{path}:{n}: phi has {len(rec.get('phi', ()))} entries but the manifest layout needs {n_phi}"
            )
        samples.append(ChainSample.from_record(rec, d, in_dims))
    if not samples:
        raise DatasetError(f"{path}: chain is empty")
    return samples


def read_chain_weights(path) -> np.ndarray:
    path = Path(path)
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if line.strip():
            try:
                rows.append(json.loads(line)["pi"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise DatasetError(f"{path}:{n}: malformed chain record") from exc
    if not rows:
        raise DatasetError(f"{path}: chain is empty")
    return np.asarray(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(config: Optional[str], out: str, seed: Optional[int] = None) -> dict:
    cfg = load_config(config, seed)
    sim = simulate_dataset(cfg.simulation)
    manifest = save_dataset(out, sim.train, sim.test)
    truth = {
        "seed": cfg.seed,
        "pi": [float(x) for x in sim.truth.pi],
        "A": [m.A.tolist() for m in sim.truth.maps],
        "b": [m.b.tolist() for m in sim.truth.maps],
        "train_index": sim.train_index.tolist(),
        "test_index": sim.test_index.tolist(),
        "config": cfg.to_dict(),
    }
    atomic_write_json(Path(out) / "truth.json", truth)
    return manifest


def cmd_fit(
    data: str,
    config: Optional[str],
    out: str,
    seed: Optional[int] = None,
    threads: int = 1,
    predictors: Optional[str] = None,
) -> dict:
    cfg = load_config(config, seed)
    threads = _check_threads(threads)
    ds = load_dataset(data)
    which = _parse_predictors(predictors, ds.K)
    train = [o.restrict(which) for o in ds.train]
    in_dims = [ds.predictor_dims[k] for k in which]
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": "fit",
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "data": str(Path(data)),
        "predictors": list(which),
        "response_dim": ds.d,
        "predictor_dims": in_dims,
        "versions": _versions(),
        "backend": kernels.BACKEND,
    }
    post = GeneralizedPosterior(train, cfg.likelihood, cfg.prior, seed=cfg.seed, threads=threads)
    init = init_params(ds.d, in_dims, cfg.prior, cfg.seed)
    lines = []
    failure = None
    try:
        chain = run_chain(post, init, cfg.mala, on_sample=lambda s: lines.append(json.dumps(s.to_record())))
    except ChainError as exc:
        failure = exc
        chain = exc.samples
    # the chain file is written whole, so readers never see a torn record
    atomic_write_text(out_dir / "chain.ndjson", "".join(line + "\n" for line in lines))
    if failure is not None:
        meta["failure"] = {"step": failure.step, "message": str(failure)}
        atomic_write_json(out_dir / "run_meta.json", meta)
        raise failure
    metrics = {}
    if chain:
        metrics = evaluate(chain, train, [], cfg.eval_likelihood(), seed=cfg.seed, threads=threads)
    metrics["predictors"] = list(which)
    atomic_write_json(out_dir / "metrics.json", metrics)
    atomic_write_json(out_dir / "run_meta.json", meta)
    return metrics


def _meta_predictors(chain_path: Path) -> Optional[list]:
    meta = chain_path.parent / "run_meta.json"
    if meta.is_file():
        try:
            return json.loads(meta.read_text()).get("predictors")
        except json.JSONDecodeError:
            return None
    return None


def cmd_evaluate(
    data: str,
    chain: str,
    config: Optional[str],
    out: Optional[str] = None,
    seed: Optional[int] = None,
    threads: int = 1,
    predictors: Optional[str] = None,
) -> dict:
    cfg = load_config(config, seed)
    threads = _check_threads(threads)
    ds = load_dataset(data)
    chain_path = Path(chain)
    if predictors is None:
        saved = _meta_predictors(chain_path)
        which = tuple(saved) if saved is not None else tuple(range(ds.K))
    else:
        which = _parse_predictors(predictors, ds.K)
    samples = read_chain(chain_path, ds.d, [ds.predictor_dims[k] for k in which])
    metrics = evaluate(samples, ds.train, ds.test, cfg.eval_likelihood(), predictors=which,
                       seed=cfg.seed, threads=threads)
    target = Path(out) / "metrics.json" if out else chain_path.parent / "metrics.json"
    atomic_write_json(target, metrics)
    return metrics


def _pairs(items: Sequence[str], flag: str) -> dict:
    out = {}
    for item in items or []:
        name, sep, value = item.partition("=")
        if not sep or not name or not value:
            raise UsageError(f"{flag}: expected TARGET=VALUE, got {item!r}")
        if name in out:
            raise UsageError(f"{flag}: target {name!r} given twice")
        out[name] = value
    return out


def cmd_graph(chains: Sequence[str], labels: Sequence[str], threshold: float, out: str) -> dict:
    chain_map = _pairs(chains, "--chain")
    label_map = _pairs(labels, "--labels")
    if not chain_map:
        raise UsageError("--chain: at least one TARGET=path is required")
    if not 0.0 <= threshold < 1.0 or math.isnan(threshold):
        raise UsageError("--threshold: must be in [0, 1)")
    if set(chain_map) != set(label_map):
        missing = sorted(set(chain_map) ^ set(label_map))
        raise UsageError(f"--labels/--chain: targets do not match ({', '.join(missing)})")
    per_target = {}
    for target, path in chain_map.items():
        p = Path(path)
        if not p.is_file():
            raise DatasetError(f"target {target!r}: chain file {p} not found")
        w = read_chain_weights(p).mean(axis=0)
        sources = [s for s in label_map[target].split(",") if s]
        per_target[target] = (sources, w)
    graph = build_graph(per_target, threshold)
    out_dir = Path(out)
    atomic_write_text(out_dir / "graph.csv", graph.to_csv())
    atomic_write_text(out_dir / "graph.dot", graph.to_dot())
    return {"nodes": graph.nodes, "edges": graph.edges}


def cmd_swb(
    marginals: Sequence[str],
    weights: Optional[str],
    config: Optional[str],
    out: str,
    seed: Optional[int] = None,
    atoms: Optional[int] = None,
) -> np.ndarray:
    cfg = load_config(config, seed)
    if not marginals:
        raise UsageError("--marginal: at least one CSV is required")
    Ys = [read_atoms(m) for m in marginals]
    d = Ys[0].shape[1]
    for path, Y in zip(marginals, Ys):
        if Y.shape[1] != d:
            raise DatasetError(f"{path}: dimension {Y.shape[1]} differs from {d}")
    if weights is None:
        pi = np.full(len(Ys), 1.0 / len(Ys))
    else:
        try:
            pi = np.array([float(t) for t in weights.split(",")])
        except ValueError as exc:
            raise UsageError(f"--weights: expected comma-separated numbers, got {weights!r}") from exc
    swb = cfg.swb if atoms is None else SwbConfig(**{**cfg.swb.__dict__, "M_G": int(atoms)})
    res = swb_solve(Ys, pi, swb, key=(cfg.seed,))
    out_dir = Path(out)
    atomic_write_text(out_dir / "barycenter.csv", atoms_to_csv(res.atoms))
    trace = "".join(f"{t},{float(v)!r}\n" for t, v in enumerate(res.trace))
    atomic_write_text(out_dir / "trace.csv", trace)
    return res.atoms


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mddr", description="Bayesian multiple density-density regression.")
    ap.add_argument("--version", action="version", version=f"mddr {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True, out_required=True):
        if data:
            p.add_argument("--data", required=True, help="dataset directory holding manifest.json")
        p.add_argument("--config", help="run config JSON (defaults when omitted)")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("simulate", help="generate the synthetic regression dataset")
    common(p, data=False)

    p = sub.add_parser("fit", help="run the MALA chain on the training split")
    common(p)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--predictors", help="comma-separated predictor indices (default: all)")

    p = sub.add_parser("evaluate", help="train/test relative error of a saved chain")
    common(p, out_required=False)
    p.add_argument("--chain", required=True, help="chain.ndjson written by fit")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--predictors", help="predictor indices used by the chain (default: from run_meta.json)")

    p = sub.add_parser("graph", help="weighted communication graph from per-target chains")
    p.add_argument("--chain", action="append", metavar="TARGET=PATH", help="chain file for one target")
    p.add_argument("--labels", action="append", metavar="TARGET=SRC1,SRC2,...", help="source labels in weight order")
    p.add_argument("--threshold", type=float, default=0.0, help="drop edges with weight <= threshold")
    p.add_argument("--out", required=True)

    p = sub.add_parser("swb", help="solve a standalone barycenter")
    p.add_argument("--marginal", action="append", metavar="CSV", help="marginal atoms, one per row")
    p.add_argument("--weights", help="comma-separated barycenter weights (default: uniform)")
    p.add_argument("--atoms", type=int, help="number of barycenter atoms")
    p.add_argument("--config", help="run config JSON (solver settings)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            cmd_simulate(args.config, args.out, args.seed)
        elif args.command == "fit":
            cmd_fit(args.data, args.config, args.out, args.seed, args.threads, args.predictors)
        elif args.command == "evaluate":
            cmd_evaluate(args.data, args.chain, args.config, args.out, args.seed, args.threads, args.predictors)
        elif args.command == "graph":
            cmd_graph(args.chain, args.labels, args.threshold, args.out)
        else:
            cmd_swb(args.marginal, args.weights, args.config, args.out, args.seed, args.atoms)
    except (ChainError, DivergenceError, FloatingPointError) as exc:
        print(f"mddr {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, UsageError, ValueError, OSError) as exc:
        print(f"mddr {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
