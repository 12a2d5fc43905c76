import json

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from mixsdr import __version__
from mixsdr.cli import (DataSchema, RunConfig, ValidationError, auc, fit_downstream, load_dataset, loo_evaluate,
                        main, multiclass_auc, parse_d, read_table, write_dataset)
from mixsdr.estim import apply_reduction
from mixsdr.model import Dataset
from mixsdr.simbench import generate


def write_schema(path, schema):
    path.write_text(yaml.safe_dump(schema.to_dict()))
    return str(path)


@pytest.fixture(scope="module")
def mixed_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("mixed")
    data = generate("mixed-d1", 300, np.random.default_rng(11))
    schema = DataSchema("Y", "categorical", data.x_names, data.h_names)
    write_dataset(root / "data.csv", data, schema)
    return root, data, str(root / "data.csv"), write_schema(root / "schema.yaml", schema)


@pytest.fixture(scope="module")
def fitted(mixed_files):
    root, data, csv, schema = mixed_files
    out = root / "fit"
    assert main(["fit", "--data", csv, "--schema", schema, "--out", str(out), "--d", "1"]) == 0
    return out


# ingestion -------------------------------------------------------------------

def test_load_three_rows(tmp_path):
    (tmp_path / "d.csv").write_text("y,x1,h1\na,0.5,1\nb,-1.25,0\na,2,1\n")
    schema = DataSchema("y", "categorical", ("x1",), ("h1",))
    data = load_dataset(tmp_path / "d.csv", schema)
    assert (data.n, data.p, data.q) == (3, 1, 1)
    assert data.X[:, 0].tolist() == [0.5, -1.25, 2.0] and data.H[:, 0].tolist() == [1, 0, 1]
    assert data.y.tolist() == ["a", "b", "a"]


def test_non_binary_value_names_row(tmp_path):
    (tmp_path / "d.csv").write_text("y,x1,h1\n1,0.5,1\n2,0.1,2\n")
    with pytest.raises(ValidationError, match="row 2") as info:
        load_dataset(tmp_path / "d.csv", DataSchema("y", "categorical", ("x1",), ("h1",)))
    assert "h1" in str(info.value)


def test_missing_value_is_an_error(tmp_path):
    (tmp_path / "d.csv").write_text("y,x1,h1\n1,,1\n2,0.1,0\n")
    with pytest.raises(ValidationError, match="missing value in row 1"):
        load_dataset(tmp_path / "d.csv", DataSchema("y", "categorical", ("x1",), ("h1",)))


def test_headerless_file_uses_positions(tmp_path):
    (tmp_path / "d.txt").write_text("1;0.5;1\n2;0.25;0\n")
    data = load_dataset(tmp_path / "d.txt", DataSchema("0", "categorical", ("1",), ("2",), ";", False))
    assert data.y.tolist() == [1, 2] and data.X[:, 0].tolist() == [0.5, 0.25]


@pytest.mark.parametrize("bad", [
    {"response": "y", "continuous": ["a"], "binary": ["a"]},
    {"response": "y", "continuous": ["y"]},
    {"response": "y"},
    {"continuous": ["a"]},
    {"response": {"name": "y", "type": "ordinal"}, "continuous": ["a"]},
])
def test_schema_invariants(bad):
    with pytest.raises(ValidationError):
        DataSchema.from_dict(bad)


def test_unknown_column(tmp_path):
    (tmp_path / "d.csv").write_text("y,x1\n1,2\n")
    with pytest.raises(ValidationError, match="'x2'"):
        load_dataset(tmp_path / "d.csv", DataSchema("y", "categorical", ("x2",)))


floats = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 3), st.integers(0, 3), st.data())
def test_write_load_round_trip(tmp_path_factory, n, p, q, draw):
    if p + q == 0:
        p = 1
    X = np.array(draw.draw(st.lists(floats, min_size=n * p, max_size=n * p)), dtype=float).reshape(n, p)
    H = np.array(draw.draw(st.lists(st.sampled_from([0, 1]), min_size=n * q, max_size=n * q)),
                 dtype=float).reshape(n, q)
    y = np.array(draw.draw(st.lists(st.integers(-5, 5), min_size=n, max_size=n)))
    data = Dataset(y, X, H)
    schema = DataSchema("resp", "categorical", data.x_names, data.h_names)
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_dataset(path, data, schema)
    back = load_dataset(path, schema)
    assert np.array_equal(back.X, data.X) and np.array_equal(back.H, data.H)
    assert np.array_equal(back.y, data.y)


# config ----------------------------------------------------------------------

def test_parse_d():
    assert parse_d("auto") == "auto" and parse_d("2") == 2 and parse_d("1,2") == (1, 2)
    with pytest.raises(ValidationError):
        parse_d("x")
    with pytest.raises(ValidationError):
        parse_d(-1)


def test_config_defaults_recorded():
    meta = RunConfig().validate().metadata()
    assert meta["version"] == __version__ and meta["seed"] == 0
    assert meta["config"]["test"] == "wald" and meta["config"]["folds"] == 10


def test_flags_override_config(tmp_path, mixed_files):
    _, _, csv, schema = mixed_files
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"seed": 4, "data": {"path": csv}, "test": {"alpha": 0.1}, "d": 2}))
    out = tmp_path / "o"
    assert main(["fit", "--config", str(cfg), "--schema", schema, "--d", "1", "--out", str(out)]) == 0
    meta = json.loads((out / "model.json").read_text())["meta"]
    assert meta["seed"] == 4 and meta["config"]["alpha"] == 0.1 and meta["config"]["d"] == 1


def test_unknown_config_key(tmp_path, mixed_files):
    _, _, csv, schema = mixed_files
    cfg = tmp_path / "c.yaml"
    cfg.write_text("nonsense: 1\n")
    assert main(["fit", "--config", str(cfg), "--data", csv, "--schema", schema]) == 2


# commands --------------------------------------------------------------------

def test_fit_writes_orthonormal_basis_of_length_75(fitted):
    header, alpha, meta = read_table(fitted / "alpha.csv")
    assert alpha.shape == (75, 1) and header == ["dir1"]
    assert abs(alpha[:, 0] @ alpha[:, 0] - 1) <= 1e-12
    assert meta["version"] == __version__ and meta["seed"] == 0 and "config" in meta
    params = json.loads((fitted / "parameters.json").read_text())
    assert np.array(params["parameters"]["Delta"]).shape == (20, 20)
    assert np.array(params["parameters"]["tau"]).shape == (55, 5)


def test_reload_reproduces_reduction_bit_for_bit(mixed_files, tmp_path):
    from mixsdr.cli import _model_files, load_model
    from mixsdr.estim import fit_sdr
    from mixsdr.model import build_fy
    _, data, _, _ = mixed_files
    live = fit_sdr(data, build_fy(data.y), "optimal", 2)
    _model_files(tmp_path, live, data, RunConfig().metadata())
    model, _ = load_model(tmp_path / "model.json")
    _, alpha, _ = read_table(tmp_path / "alpha.csv")
    _, center, _ = read_table(tmp_path / "center.csv")
    assert np.array_equal(alpha, live.basis) and np.array_equal(center[:, 0], live.center)
    assert np.array_equal(apply_reduction(model, data.X, data.H), apply_reduction(live, data.X, data.H))


def test_reduce_output(fitted, mixed_files, tmp_path):
    _, data, csv, schema = mixed_files
    assert main(["reduce", "--data", csv, "--schema", schema, "--model", str(fitted / "model.json"),
                 "--out", str(tmp_path)]) == 0
    header, table, meta = read_table(tmp_path / "reduced.csv")
    assert header == ["Y", "r1"] and table.shape == (300, 2)
    assert meta["config"]["command"] == "reduce"


def test_testdim_auto_lists_every_j(mixed_files, tmp_path):
    _, _, csv, schema = mixed_files
    assert main(["testdim", "--data", csv, "--schema", schema, "--auto", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "testdim.json").read_text())
    branch = doc["report"]["branches"]["b"]
    assert [row["j"] for row in branch["rows"]] == list(range(5))
    assert {"d_wald", "d_wchisq"} <= set(branch) and doc["report"]["d"] == branch["d_wald"]


def test_commands_deterministic(mixed_files, tmp_path):
    _, _, csv, schema = mixed_files
    args = ["select", "--data", csv, "--schema", schema, "--d", "1", "--n-lambda", "5", "--folds", "3",
            "--gammas", "0,0.5,1", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "regpath.json").read_text().replace("/a", "/b") == \
        (tmp_path / "b" / "regpath.json").read_text()


def test_select_rejects_mismatched_penalty(mixed_files, tmp_path):
    _, _, csv, schema = mixed_files
    assert main(["select", "--data", csv, "--schema", schema, "--penalty", "continuous-rows",
                 "--out", str(tmp_path)]) == 2


def test_simulate_tables(tmp_path):
    assert main(["simulate", "--scenarios", "cont-d1", "--n-grid", "100", "--reps", "2",
                 "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "replicates.csv").read_text().splitlines()
    assert lines[0].startswith("# ") and len(lines) == 2 + 2
    assert json.loads(lines[0][2:])["config"]["reps"] == 2
    assert len((tmp_path / "summary.csv").read_text().splitlines()) == 3


# exit codes ------------------------------------------------------------------

def test_exit_code_validation(mixed_files, tmp_path):
    _, _, csv, schema = mixed_files
    assert main(["fit", "--data", csv, "--schema", schema, "--d", "9", "--out", str(tmp_path)]) == 2
    assert main(["fit", "--data", str(tmp_path / "none.csv"), "--schema", schema]) == 2
    with pytest.raises(SystemExit) as info:
        main(["fit", "--test", "bogus"])
    assert info.value.code == 2


def test_exit_code_numerical(tmp_path):
    # a binary column that never varies has no finite Ising estimate
    rng = np.random.default_rng(0)
    data = Dataset(np.repeat([1, 2], 20), rng.normal(size=(40, 2)), np.column_stack([rng.integers(0, 2, 40),
                                                                                      np.ones(40)]))
    schema = DataSchema("y", "categorical", data.x_names, data.h_names)
    write_dataset(tmp_path / "d.csv", data, schema)
    assert main(["fit", "--data", str(tmp_path / "d.csv"), "--schema", write_schema(tmp_path / "s.yaml", schema),
                 "--out", str(tmp_path / "o")]) == 3


def test_exit_code_success_prints_json(fitted, mixed_files, tmp_path, capsys):
    _, _, csv, schema = mixed_files
    assert main(["predict", "--data", csv, "--schema", schema, "--model", str(fitted / "model.json"),
                 "--out", str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out)["n_predicted"] == 300


# prediction ------------------------------------------------------------------

def test_auc_known_values():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc([1, 1, 1, 1], [0, 1, 0, 1]) == 0.5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=4, max_size=40, unique=True), st.data())
def test_auc_reversed_sign(scores, draw):
    labels = draw.draw(st.lists(st.booleans(), min_size=len(scores), max_size=len(scores)))
    if all(labels) or not any(labels):
        labels[0] = not labels[0]
    a = auc(scores, labels)
    assert abs(auc(-np.array(scores), labels) - (1 - a)) <= 1e-12


def test_auc_brute_force_pairs(rng):
    s = rng.integers(0, 5, 60).astype(float)
    pos = rng.random(60) < 0.4
    pairs = [(a > b) + 0.5 * (a == b) for a in s[pos] for b in s[~pos]]
    assert np.isclose(auc(s, pos), np.mean(pairs))


def test_multiclass_auc_is_one_vs_rest_mean(rng):
    prob = rng.dirichlet(np.ones(3), size=50)
    labels = rng.integers(0, 3, 50)
    expected = np.mean([auc(prob[:, c], labels == c) for c in range(3)])
    assert multiclass_auc(prob, labels) == expected


def _reduction_dataset(z, y):
    return Dataset(y, z[:, None], np.zeros((len(y), 0)))


def test_separated_reduction_loo_perfect():
    z = np.r_[np.linspace(-3, -1, 20), np.linspace(1, 3, 20)]
    y = np.repeat([0, 1], 20)
    ev = loo_evaluate(_reduction_dataset(z, y), "categorical", "pfc", 1, features="full")
    assert ev["error"] == 0.0 and ev["auc"] == 1.0


def test_random_labels_auc_near_half():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(200, 1))
    y = rng.permutation(np.repeat([0, 1], 100))
    ds = fit_downstream(z, y)
    assert abs(auc(ds.proba(z)[:, 1], y == 1) - 0.5) <= 0.1


def test_random_labels_permutation_null():
    # the AUC of a fixed score is centered at 1/2 over label permutations
    rng = np.random.default_rng(6)
    z = rng.normal(size=(200, 1))
    y = np.repeat([0, 1], 100)
    ds = fit_downstream(z, rng.permutation(y))
    score = ds.proba(z)[:, 1]
    null = [auc(score, rng.permutation(y) == 1) for _ in range(400)]
    assert abs(np.mean(null) - 0.5) <= 0.01 and np.quantile(np.abs(np.array(null) - 0.5), 0.95) <= 0.1


def test_single_class_training_response():
    from mixsdr.model import DegenerateResponseError
    with pytest.raises(DegenerateResponseError):
        fit_downstream(np.ones((5, 1)), np.zeros(5))


def test_linear_downstream_recovers_line(rng):
    z = rng.normal(size=(30, 2))
    y = 1.0 + z @ np.array([2.0, -1.0])
    ds = fit_downstream(z, y, continuous=True)
    assert np.allclose(ds.predict(z), y)


def test_fast_and_strict_loo_modes(mixed_files):
    _, data, _, _ = mixed_files
    sub = data.subset(np.arange(60))
    fast = loo_evaluate(sub, "categorical", "optimal", 1, strict=False)
    strict = loo_evaluate(sub, "categorical", "optimal", 1, strict=True)
    assert fast["prob"].shape == strict["prob"].shape == (60, 6)
    assert np.allclose(fast["prob"].sum(1), 1) and np.allclose(strict["prob"].sum(1), 1)


def test_predict_loo_metrics_written(fitted, mixed_files, tmp_path):
    _, _, csv, schema = mixed_files
    assert main(["predict", "--data", csv, "--schema", schema, "--model", str(fitted / "model.json"),
                 "--loo", "--out", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())["metrics"]
    assert metrics["loo"]["mode"] == "fast" and 0 <= metrics["loo"]["error"] <= 1
    first = (tmp_path / "predictions.csv").read_text().splitlines()[1].split(",")
    assert first[:2] == ["observed", "predicted"] and len(first) == 8
