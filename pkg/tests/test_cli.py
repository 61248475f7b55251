import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from dropout_risk.cli import EXIT_CONFIG, EXIT_DEPENDENCY, main
from dropout_risk.config import PipelineConfig, load_config, parse_overrides
from dropout_risk.datamodel import ConfigError, Standardizer
from dropout_risk.dspp import load_model
from dropout_risk.pipeline import (
    STAGES,
    TABLE_COLUMNS,
    FigureGrid,
    emit_figure_data,
    sha256_file,
    stage_seed,
)
from dropout_risk.preprocess import binned_arrays, read_binned_csv

TINY = Path(__file__).parent / "data" / "tiny.toml"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_bundled_config_defaults():
    cfg = load_config()
    assert cfg.preprocess.params == ("temperature", "wind_speed", "precipitation")
    assert cfg.preprocess.min_members == 4000 and cfg.preprocess.n_groups == 24
    assert (cfg.bayes.chains, cfg.bayes.draws) == (6, 10_000)
    assert cfg.evaluation.n_test == 1000
    assert cfg.dspp.layer_dims == (5, 3, 3, 1) and cfg.dspp.n_inducing == 300
    assert cfg.dspp.epochs == 500 and cfg.dspp.lr == 0.1
    assert cfg.synthetic.states == ("SA", "SB")


def test_overrides_are_coerced():
    cfg = load_config(TINY, parse_overrides(["dspp.epochs=7", "dspp.layer_dims=4,1",
                                             "featsel.use_selection=true", "bayes.chains=3"]))
    assert cfg.dspp.epochs == 7 and cfg.dspp.layer_dims == (4, 1)
    assert cfg.featsel.use_selection is True and cfg.bayes.chains == 3


@pytest.mark.parametrize("items", [["dspp.nope=1"], ["nope=1"], ["dspp.epochs=1.5"],
                                   ["featsel.use_selection=maybe"], ["dspp=3"]])
def test_bad_overrides(items):
    with pytest.raises(ConfigError):
        load_config(TINY, parse_overrides(items))


def test_override_syntax():
    assert parse_overrides(["a.b=1", "c= x "]) == {"a": {"b": "1"}, "c": "x"}
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])


@pytest.mark.parametrize("items", [["preprocess.min_members=3999"], ["preprocess.n_groups=20"],
                                   ["evaluation.n_test=150"], ["dspp.layer_dims=3,2"],
                                   ["triggers.thresholds=0.2,1.0"], ["preprocess.params=humidity"],
                                   ["dspp.target=probit"]])
def test_validation(items):
    with pytest.raises(ConfigError):
        load_config(TINY, parse_overrides(items))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.toml")
    (tmp_path / "bad.toml").write_text("seed = = 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")


def test_config_hash_ignores_out_and_jobs():
    a = load_config(TINY)
    b = load_config(TINY, {"out": "elsewhere", "jobs": "4"})
    c = load_config(TINY, {"seed": "2"})
    assert a.config_hash() == b.config_hash() != c.config_hash()
    assert isinstance(PipelineConfig().config_hash(), str)


def test_stage_seeds_are_named_substreams():
    assert stage_seed(0, "preprocess", "SA") == stage_seed(0, "preprocess", "SA")
    seeds = {stage_seed(0, s, st) for s in STAGES for st in ("", "SA", "SB")}
    assert len(seeds) == 3 * len(STAGES)
    assert stage_seed(1, "preprocess", "SA") != stage_seed(0, "preprocess", "SA")
    assert all(0 <= s < 2 ** 63 for s in seeds)


# ---------------------------------------------------------------------------
# figure data
# ---------------------------------------------------------------------------

class Plane:
    def __init__(self, d):
        self.standardizer = Standardizer(np.zeros(d), np.ones(d))
        self.input_dim = d

    def predict(self, x):
        x = np.atleast_2d(x)
        return x.sum(1), np.full(len(x), 0.04)


def test_emit_figure_rows_and_values(tmp_path):
    grid = FigureGrid({"a": (0.0, 1.0), "b": (2.0, 4.0), "c": (0.0, 1.0)}, {"a": 0.5, "b": 3.0, "c": 0.25}, 50)
    written = emit_figure_data({"M": (Plane(3), ["a", "b", "c"]), "M1": (Plane(1), ["a"])}, grid, tmp_path, "XX", 7)
    assert [p.name for p in written] == ["XX_M_grid.csv", "XX_M_errorbars.csv"]
    rows = list(csv.reader(open(written[0])))
    assert rows[0] == ["a", "b", "mean", "std"] and len(rows) == 2501
    for r in rows[1:]:
        a, b, m, s = map(float, r)
        assert m == a + b + 0.25 and s == 0.2
    bars = list(csv.reader(open(written[1])))
    assert bars[0] == ["a", "b", "c", "mean", "std"] and len(bars) == 8


def test_emit_figure_dimension_mismatch(tmp_path):
    grid = FigureGrid({"a": (0.0, 1.0), "b": (0.0, 1.0)}, {"a": 0.5, "b": 0.5}, 5)
    with pytest.raises(ValueError):
        emit_figure_data({"M": (Plane(3), ["a", "b"])}, grid, tmp_path, "XX")
    with pytest.raises(ValueError):
        emit_figure_data({"M": (Plane(3), ["a", "b", "z"])}, grid, tmp_path, "XX")


def test_figure_grid_from_training():
    X = np.array([[0.0, 10.0], [1.0, 30.0], [4.0, 20.0]])
    g = FigureGrid.from_training(["a", "b"], X, 9)
    assert g.ranges == {"a": (0.0, 4.0), "b": (10.0, 30.0)}
    assert g.slice_values == {"a": 1.0, "b": 20.0} and g.cells == 9


# ---------------------------------------------------------------------------
# end-to-end smoke run
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke") / "run"
    assert main(["all", "--config", str(TINY), "--out", str(out)]) == 0
    return out


def test_smoke_artifacts_present(smoke_run):
    for name in ("measurements.csv", "ingest.json", "report/table_mape.csv", "report/table_r2.csv",
                 "report/a1_map.json"):
        assert (smoke_run / name).exists(), name
    for st in ("SA", "SB"):
        for name in ("featsel.json", "bins.csv", "train.csv", "test.csv", "preprocess.json", "dspp.json",
                     "bayes_posterior.csv", "bayes_summary.json", "eval.json", "importance.json",
                     "dspp_1.json", "dspp_2.json", "reduced.json", "triggers.json"):
            assert (smoke_run / "states" / st / name).exists(), (st, name)


def test_report_tables(smoke_run):
    for name in ("table_mape.csv", "table_r2.csv"):
        rows = list(csv.reader(open(smoke_run / "report" / name)))
        assert tuple(rows[0]) == TABLE_COLUMNS
        assert [r[0] for r in rows[1:]] == ["SA", "SB"]
        assert all(r[5] in "TWP" and r[5] for r in rows[1:])


def test_a1_map_has_each_state(smoke_run):
    a1 = json.loads((smoke_run / "report" / "a1_map.json").read_text())
    assert sorted(a1) == ["SA", "SB"]
    assert set(a1.values()) <= {"temperature", "wind_speed", "precipitation"}


def test_manifests_hash_their_files(smoke_run):
    manifests = sorted((smoke_run / "manifests").rglob("*.json"))
    assert len(manifests) == 3 + 8 * 2
    cfg_hash = load_config(TINY).config_hash()
    for m in manifests:
        d = json.loads(m.read_text())
        assert d["config_hash"] == cfg_hash and isinstance(d["seed"], int)
        for rel, digest in d["outputs"].items():
            assert sha256_file(smoke_run / rel) == digest


def test_grid_matches_direct_predict(smoke_run):
    d = smoke_run / "states" / "SA"
    model = load_model(d / "dspp.json")
    X, _ = binned_arrays(read_binned_csv(d / "train.csv"))
    grid = FigureGrid.from_training(["temperature", "wind_speed", "precipitation"], X, 10)
    rows = np.loadtxt(smoke_run / "report" / "figures" / "SA_DSPP_grid.csv", delimiter=",", skiprows=1)
    assert rows.shape == (100, 4)
    pts = np.column_stack([rows[:, :2], np.full(100, grid.slice_values["precipitation"])])
    mean, var = model.predict(pts)
    np.testing.assert_allclose(rows[:, 2], mean, rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(rows[:, 3], np.sqrt(var), rtol=1e-5, atol=1e-7)


def test_evaluate_without_model_is_dependency_error(smoke_run, tmp_path, capsys):
    out = tmp_path / "copy"
    shutil.copytree(smoke_run, out)
    (out / "states" / "SA" / "dspp.json").unlink()
    code = main(["evaluate", "--config", str(TINY), "--out", str(out), "--state", "SA"])
    assert code == EXIT_DEPENDENCY
    assert "train-dspp" in capsys.readouterr().err


def test_unknown_state_is_dependency_error(smoke_run, capsys):
    assert main(["triggers", "--config", str(TINY), "--out", str(smoke_run), "--state", "ZZ"]) == EXIT_DEPENDENCY


def test_bad_config_exit_code(tmp_path):
    assert main(["synth", "--config", str(TINY), "--out", str(tmp_path), "--set", "dspp.layer_dims=3,2"]) == EXIT_CONFIG
    assert main(["synth", "--config", str(TINY), "--out", str(tmp_path), "--threshold", "1.5"]) == EXIT_CONFIG


def test_threshold_flag(smoke_run, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(smoke_run, out)
    assert main(["triggers", "--config", str(TINY), "--out", str(out), "--state", "SB", "--threshold", "0.25"]) == 0
    trig = json.loads((out / "states" / "SB" / "triggers.json").read_text())
    assert list(trig["regions"]) == ["0.25"]
