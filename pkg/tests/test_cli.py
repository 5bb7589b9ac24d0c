import json
from pathlib import Path

import numpy as np
import pytest

from mddr.cli import cmd_fit, cmd_simulate, main, read_chain
from mddr.config import ConfigError, RunConfig, load_config
from mddr.data import DatasetError, atomic_write_json, atoms_to_csv, load_dataset, read_atoms, save_dataset
from mddr.model import Observation

SMALL = {
    "seed": 3,
    "likelihood": {"w": 10, "L_eval": 20},
    "swb": {"T": 3, "L_solver": 5, "M_G": 5},
    "mala": {"n_steps": 2},
    "simulation": {"n_obs": 3, "n_atoms": 5, "T": 5},
    "evaluation": {"L_eval": 25},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


@pytest.fixture
def small_data(tmp_path, small_config):
    out = tmp_path / "data"
    assert main(["simulate", "--config", small_config, "--out", str(out)]) == 0
    return str(out)


# --- config ----------------------------------------------------------------------------


def test_config_defaults_and_seed_propagation():
    cfg = RunConfig.from_dict({"seed": 7})
    assert cfg.swb.seed == 7 and cfg.mala.seed == 7 and cfg.simulation.seed == 7
    assert cfg.likelihood.w == 10 and cfg.eval_likelihood().L_eval == 1000


def test_config_round_trip():
    cfg = RunConfig.from_dict(SMALL)
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.to_dict() == cfg.to_dict()


def test_config_errors_name_field_paths():
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict({"swb": {"T": "many", "bogus": 1}, "extra": {}, "mala": {"eta1": -1.0}})
    msgs = err.value.errors
    assert "swb.T: expected int, got str" in msgs
    assert "swb.bogus: unknown field" in msgs and "extra: unknown section" in msgs
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict({"mala": {"eta1": -1.0}})
    assert any(m.startswith("mala.eta1") for m in err.value.errors)


def test_config_load_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(str(bad))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))
    assert load_config(None, seed=4).seed == 4


# --- dataset files ----------------------------------------------------------------------


def test_csv_round_trip_is_exact(tmp_path):
    pts = np.random.default_rng(0).normal(size=(4, 3))
    (tmp_path / "a.csv").write_text(atoms_to_csv(pts))
    assert np.array_equal(read_atoms(tmp_path / "a.csv", 3), pts)
    with pytest.raises(DatasetError):
        read_atoms(tmp_path / "a.csv", 2)


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    train = [Observation((rng.normal(size=(3, 2)), rng.normal(size=(4, 1))), rng.normal(size=(5, 2)))]
    save_dataset(tmp_path, train, [])
    ds = load_dataset(tmp_path)
    assert ds.d == 2 and tuple(ds.predictor_dims) == (2, 1) and ds.test == []
    assert np.array_equal(ds.train[0].response.points, train[0].response.points)


def test_dataset_validation(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
    atomic_write_json(tmp_path / "manifest.json", {"schema_version": 1, "response_dim": 2, "predictor_dims": [1],
                                                    "observations": [{"split": "train", "predictors": ["x.csv"],
                                                                      "response": "y.csv"}]})
    with pytest.raises(DatasetError, match="x.csv"):
        load_dataset(tmp_path)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write_json(tmp_path / "m.json", {"b": 1, "a": 2})
    assert [p.name for p in tmp_path.iterdir()] == ["m.json"]
    assert (tmp_path / "m.json").read_text().index('"a"') < (tmp_path / "m.json").read_text().index('"b"')


# --- commands ---------------------------------------------------------------------------


def test_simulate_split_and_determinism(tmp_path, small_config, small_data):
    ds = load_dataset(small_data)
    assert len(ds.train) == 2 and len(ds.test) == 1
    again = tmp_path / "again"
    assert main(["simulate", "--config", small_config, "--out", str(again)]) == 0
    for f in sorted(p.relative_to(small_data) for p in Path(small_data).rglob("*.csv")):
        assert (again / f).read_bytes() == (Path(small_data) / f).read_bytes()
    truth = json.loads((again / "truth.json").read_text())
    assert len(truth["A"]) == 3 and truth["pi"] == pytest.approx([2 / 3, 1 / 6, 1 / 6])


def test_simulate_ten_observations(tmp_path):
    cfg = dict(SMALL, simulation={"n_obs": 10, "n_atoms": 4, "T": 2})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    cmd_simulate(str(path), str(tmp_path / "d"))
    ds = load_dataset(tmp_path / "d")
    assert (len(ds.train), len(ds.test)) == (7, 3)


def test_fit_writes_outputs_and_is_deterministic(tmp_path, small_config, small_data):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["fit", "--data", small_data, "--config", small_config, "--out", str(a), "--seed", "42"]) == 0
    assert main(["fit", "--data", small_data, "--config", small_config, "--out", str(b), "--seed", "42",
                 "--threads", "3"]) == 0
    assert {p.name for p in a.iterdir()} == {"chain.ndjson", "metrics.json", "run_meta.json"}
    assert (a / "chain.ndjson").read_bytes() == (b / "chain.ndjson").read_bytes()
    meta = json.loads((a / "run_meta.json").read_text())
    assert meta["seed"] == 42 and meta["config"]["seed"] == 42
    assert RunConfig.from_dict(meta["config"]).to_dict() == meta["config"]
    chain = read_chain(a / "chain.ndjson", 2, [2, 2, 2])
    assert len(chain) == 2


def test_fit_single_predictor_then_evaluate(tmp_path, small_config, small_data):
    out = tmp_path / "ddr"
    assert main(["fit", "--data", small_data, "--config", small_config, "--out", str(out), "--predictors", "0"]) == 0
    assert main(["evaluate", "--data", small_data, "--config", small_config, "--chain", str(out / "chain.ndjson"),
                 "--out", str(tmp_path / "ev")]) == 0
    m = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert m["predictors"] == [0] and "test_re" in m and m["L_eval"] == 25
    again = tmp_path / "ev2"
    main(["evaluate", "--data", small_data, "--config", small_config, "--chain", str(out / "chain.ndjson"),
          "--out", str(again)])
    assert (again / "metrics.json").read_bytes() == (tmp_path / "ev" / "metrics.json").read_bytes()


def test_evaluate_rejects_layout_mismatch(tmp_path, small_config, small_data):
    out = tmp_path / "f"
    cmd_fit(small_data, small_config, str(out))
    code = main(["evaluate", "--data", small_data, "--config", small_config, "--chain", str(out / "chain.ndjson"),
                 "--predictors", "0,1", "--out", str(tmp_path / "x")])
    assert code == 2


def test_validation_exit_code(tmp_path, small_data):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"mala": {"eta1": 0}}))
    assert main(["fit", "--data", small_data, "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["fit", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 2


def write_chain(path, pis):
    path.write_text("".join(json.dumps({"step": i, "log_post": 0.0, "accepted_phi": True, "accepted_omega": True,
                                        "pi": list(p), "phi": []}) + "\n" for i, p in enumerate(pis)))


def test_graph_command(tmp_path):
    write_chain(tmp_path / "t.ndjson", [(0.5, 0.3, 0.2)] * 3)
    args = ["graph", "--chain", f"T={tmp_path / 't.ndjson'}", "--labels", "T=A,B,C", "--out", str(tmp_path / "g")]
    assert main(args) == 0
    assert len((tmp_path / "g" / "graph.csv").read_text().splitlines()) == 4
    assert main(args[:-2] + ["--threshold", str(1 / 3), "--out", str(tmp_path / "g3")]) == 0
    assert (tmp_path / "g3" / "graph.csv").read_text().splitlines()[1:] == ["A,T,0.5"]


def test_graph_missing_chain_names_target(tmp_path, capsys):
    code = main(["graph", "--chain", f"Mono={tmp_path / 'nope.ndjson'}", "--labels", "Mono=A,B", "--out",
                 str(tmp_path / "g")])
    assert code == 2 and "Mono" in capsys.readouterr().err


def test_swb_command(tmp_path):
    (tmp_path / "a.csv").write_text("0,0\n")
    (tmp_path / "b.csv").write_text("2,4\n")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"swb": {"T": 500, "L_solver": 10}}))
    assert main(["swb", "--marginal", str(tmp_path / "a.csv"), "--marginal", str(tmp_path / "b.csv"),
                 "--weights", "0.5,0.5", "--atoms", "1", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    atoms = read_atoms(tmp_path / "o" / "barycenter.csv", 2)
    assert np.allclose(atoms, [[1.0, 2.0]], atol=1e-3)
    trace = [float(line.split(",")[1]) for line in (tmp_path / "o" / "trace.csv").read_text().splitlines()]
    assert trace[-1] <= trace[0]


def test_swb_single_marginal_copies_input(tmp_path):
    pts = np.array([[0.0, 1.0], [2.0, -1.0], [3.0, 0.5]])
    (tmp_path / "a.csv").write_text(atoms_to_csv(pts))
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"swb": {"T": 800, "L_solver": 20}}))
    assert main(["swb", "--marginal", str(tmp_path / "a.csv"), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    atoms = read_atoms(tmp_path / "o" / "barycenter.csv", 2)
    assert np.allclose(atoms[np.lexsort(atoms.T[::-1])], pts[np.lexsort(pts.T[::-1])], atol=2e-2)
