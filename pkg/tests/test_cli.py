import csv
import json

import numpy as np
import pytest

from gpdyn import cli


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def lv_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("lv")
    assert run("generate", "--system", "lotka-volterra", "--density", 0.01, "--seed", 1, "--out", out) == 0
    assert run("fit", "--system", "lotka-volterra", "--density", 0.01, "--seed", 1, "--data", out, "--out", out) == 0
    return out


def test_generate_outputs(lv_run):
    names = {p.name for p in lv_run.iterdir()}
    assert {"train.csv", "train.clean.csv", "train.json", "test.csv", "manifest_generate.json"} <= names
    man = json.loads((lv_run / "manifest_generate.json").read_text())
    assert man["seeds"]["data"] == 1 and len(man["config_sha256"]) == 64
    assert man["config"]["data"]["density"] == 0.01


def test_fit_outputs(lv_run):
    post = json.loads((lv_run / "posterior.json").read_text())
    assert post["kind"] == "gaussian" and len(post["equations"]) == 2
    metrics = json.loads((lv_run / "metrics.json").read_text())
    assert np.isfinite(metrics["eps1"]) and metrics["n_points"] == [20]
    with open(lv_run / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["term"] for r in rows] == ["x1", "x1*x2", "x1*x2", "x2"]


def test_predict_from_artifact(lv_run, tmp_path):
    assert run("predict", "--posterior", lv_run, "--ic", 2, 1.2, "--t-end", 2, "--out", tmp_path) == 0
    with open(tmp_path / "band.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x1_mean", "x1_sd", "x2_mean", "x2_sd"]
    assert float(rows[1][1]) == pytest.approx(2.0) and float(rows[-1][0]) == pytest.approx(2.0)
    band = json.loads((tmp_path / "band.json").read_text())
    assert band["draws_used"] + band["divergent_draws"] == 100


def test_fit_is_reproducible(lv_run, tmp_path):
    assert run("fit", "--system", "lotka-volterra", "--density", 0.01, "--seed", 1, "--data", lv_run, "--out", tmp_path) == 0
    a = json.loads((lv_run / "posterior.json").read_text())
    b = json.loads((tmp_path / "posterior.json").read_text())
    assert a == b


def test_env_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert run("generate", "--system", "logistic") == 0
    assert (tmp_path / "env" / "train.csv").exists()


def test_benchmark_grid(tmp_path):
    cfg = {"system": "lotka-volterra", "gp": {"restarts": 2},
           "benchmark": {"densities": [0.01], "noise_levels": [0.0, 0.1], "seeds": [0]}}
    (tmp_path / "grid.json").write_text(json.dumps(cfg))
    assert run("benchmark", "--config", tmp_path / "grid.json", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert len(rep["cells"]) == 2
    assert all(np.isfinite(c["eps1"]) for c in rep["cells"])


def test_logistic_network_pipeline(tmp_path):
    cfg = {"system": "logistic", "gp": {"restarts": 2}, "inference": {"steps": 3000, "burn_in": 1000, "thin": 10}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("fit", "--config", tmp_path / "c.json", "--out", tmp_path) == 0
    meta = json.loads((tmp_path / "chain.json").read_text())
    assert meta["kind"] == "network" and meta["shape"] == [200, 24]
    assert run("predict", "--posterior", tmp_path, "--t-end", 9, "--out", tmp_path) == 0
    with open(tmp_path / "band.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x_mean", "x_sd"]


class TestExitCodes:
    def test_missing_system(self, tmp_path):
        assert run("generate", "--out", tmp_path) == 2

    def test_argparse_usage(self):
        with pytest.raises(SystemExit) as exc:
            run("generate", "--system", "pendulum")
        assert exc.value.code == 2

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"system": "logistic", "bogus": 1}))
        assert run("generate", "--config", tmp_path / "c.json", "--out", tmp_path) == 2

    def test_bad_density(self, tmp_path):
        assert run("generate", "--system", "lotka-volterra", "--density", 2, "--out", tmp_path) == 2

    def test_missing_posterior(self, tmp_path):
        assert run("predict", "--posterior", tmp_path, "--out", tmp_path) == 3

    def test_benchmark_rejects_sampler_scenarios(self, tmp_path):
        assert run("benchmark", "--system", "logistic", "--out", tmp_path) == 2
