"""On-disk datasets: a JSON manifest plus one headerless CSV per atom cloud.

Layout written by :func:`save_dataset`::

    manifest.json
    train/obs_000/pred_0.csv ... pred_{K-1}.csv, response.csv
    test/obs_000/...

Paths inside the manifest are relative to its directory.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Observation
from .sliced import EmpiricalDistribution

SCHEMA_VERSION = 1


class DatasetError(ValueError):
    """Malformed manifest or atom file."""


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to a sibling temp file, fsync it and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, doc) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def atoms_to_csv(points) -> str:
    buf = io.StringIO()
    np.savetxt(buf, np.asarray(points, dtype=np.float64), delimiter=",", fmt="%.17g")
    return buf.getvalue()


def read_atoms(path, dim=None) -> np.ndarray:
    """Load one atom cloud; ``dim`` checks the column count."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"{path}: file not found")
    try:
        pts = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    if pts.shape[0] == 0:
        raise DatasetError(f"{path}: no atoms")
    if dim is not None and pts.shape[1] != dim:
        raise DatasetError(f"{path}: expected {dim} columns, found {pts.shape[1]}")
    if not np.all(np.isfinite(pts)):
        raise DatasetError(f"{path}: non-finite values")
    return pts


@dataclass
class Dataset:
    d: int
    predictor_dims: tuple
    train: list
    test: list
    root: Path

    @property
    def K(self) -> int:
        return len(self.predictor_dims)


def save_dataset(out_dir, train: Sequence[Observation], test: Sequence[Observation]) -> dict:
    """Write CSVs then the manifest (last, so a manifest always points at complete files)."""
    out = Path(out_dir)
    obs0 = (list(train) + list(test))[0]
    d = obs0.response.dim
    dims = [F.dim for F in obs0.predictors]
    entries = []
    for split, items in (("train", train), ("test", test)):
        for i, obs in enumerate(items):
            rel = Path(split) / f"obs_{i:03d}"
            preds = []
            for k, F in enumerate(obs.predictors):
                name = rel / f"pred_{k}.csv"
                atomic_write_text(out / name, atoms_to_csv(F.points))
                preds.append(name.as_posix())
            resp = rel / "response.csv"
            atomic_write_text(out / resp, atoms_to_csv(obs.response.points))
            entries.append({"split": split, "predictors": preds, "response": resp.as_posix()})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "response_dim": d,
        "predictor_dims": dims,
        "observations": entries,
    }
    atomic_write_json(out / "manifest.json", manifest)
    return manifest


def load_dataset(data_dir) -> Dataset:
    """Read and validate a manifest and every file it references."""
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"{mpath}: manifest not found")
    try:
        man = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: not valid JSON ({exc.msg})") from exc
    for key in ("schema_version", "response_dim", "predictor_dims", "observations"):
        if key not in man:
            raise DatasetError(f"{mpath}: missing field {key!r}")
    if man["schema_version"] != SCHEMA_VERSION:
        raise DatasetError(f"{mpath}: unsupported schema_version {man['schema_version']!r}")
    d = man["response_dim"]
    dims = man["predictor_dims"]
    if not (isinstance(d, int) and d >= 1):
        raise DatasetError(f"{mpath}: response_dim must be a positive integer")
    if not (isinstance(dims, list) and dims and all(isinstance(h, int) and h >= 1 for h in dims)):
        raise DatasetError(f"{mpath}: predictor_dims must be a nonempty list of positive integers")
    entries = man["observations"]
    if not isinstance(entries, list) or not entries:
        raise DatasetError(f"{mpath}: at least one observation is required")
    train, test = [], []
    for n, e in enumerate(entries):
        where = f"{mpath}: observations[{n}]"
        if e.get("split") not in ("train", "test"):
            raise DatasetError(f"{where}: split must be 'train' or 'test'")
        preds = e.get("predictors")
        if not isinstance(preds, list) or len(preds) != len(dims):
            raise DatasetError(f"{where}: expected {len(dims)} predictor files")
        F = tuple(EmpiricalDistribution(read_atoms(root / p, h)) for p, h in zip(preds, dims))
        G = EmpiricalDistribution(read_atoms(root / e.get("response", ""), d))
        (train if e["split"] == "train" else test).append(Observation(F, G))
    if not train:
        raise DatasetError(f"{mpath}: no training observations")
    return Dataset(d, tuple(dims), train, test, root)
