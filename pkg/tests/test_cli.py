from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from robust_conformal import cli, io
from robust_conformal.bench import simulate_observational
from robust_conformal.conformal import make_split_plan
from robust_conformal.sensitivity import ArmRates, SensitivityTarget, sensitivity_weight


def config(tmp_path, name="cfg.yaml", **sections):
    path = tmp_path / name
    path.write_text(yaml.safe_dump({"schema_version": 1, **sections}), encoding="utf-8")
    return str(path)


SIM = {"scenario": "Linear", "eta": 0.5, "n_train": 300, "n_test": 300, "d": 5, "sparsity": 3}


def coverage_of(path, y):
    t = io.read_table(path, io.INTERVAL_TYPES)
    return float(np.mean((t["lower"] <= y) & (y <= t["upper"])))


class TestSimulate:
    def test_reproducible(self, tmp_path):
        cfg = config(tmp_path, simulation=SIM, seed=4)
        assert cli.run(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert cli.run(["simulate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        for f in ("source.csv", "target.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_seed_override(self, tmp_path):
        cfg = config(tmp_path, simulation=SIM, seed=4)
        cli.run(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
        cli.run(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"])
        assert (tmp_path / "a/source.csv").read_bytes() != (tmp_path / "b/source.csv").read_bytes()

    def test_no_shift_means(self, tmp_path):
        cfg = config(tmp_path, simulation={**SIM, "eta": 0.0, "n_train": 4000, "n_test": 4000})
        cli.run(["simulate", "--config", cfg, "--out", str(tmp_path / "o")])
        src = io.read_dataset(tmp_path / "o/source.csv", need_y=True)
        tgt = io.read_dataset(tmp_path / "o/target.csv", need_y=True)
        se = np.sqrt(2 / 4000)
        assert np.all(np.abs(src.X.mean(0) - tgt.X.mean(0)) < 4 * se)

    def test_missing_key(self, tmp_path, capsys):
        sim = dict(SIM)
        del sim["n_test"]
        rc = cli.run(["simulate", "--config", config(tmp_path, simulation=sim), "--out", str(tmp_path / "o")])
        assert rc == cli.EXIT_CONFIG
        assert "simulation.n_test" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_missing_config_file(self, tmp_path):
        assert cli.run(["simulate", "--config", str(tmp_path / "nope.yaml")]) == cli.EXIT_CONFIG


@pytest.fixture
def iid_data(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(1000, 3))
    y = X @ [1.0, -0.5, 0.0] + rng.normal(size=1000)
    io.write_table(tmp_path / "train.csv", io.Dataset(X[:600], y[:600]).columns())
    io.write_table(tmp_path / "test.csv", io.Dataset(X[600:], y[600:]).columns())
    return tmp_path, y[600:]


class TestPredict:
    def run(self, d, method):
        cfg = config(d, "p.yaml", method=method)
        return cli.run(["predict", "--config", cfg, "--train", str(d / "train.csv"), "--test", str(d / "test.csv"),
                        "--out", str(d / "pred")])

    def test_cp_iid_coverage(self, iid_data):
        d, y = iid_data
        assert self.run(d, {"name": "CP", "alpha": 0.1}) == 0
        assert abs(coverage_of(d / "pred/intervals.csv", y) - 0.9) < 0.04

    def test_rho_blocks(self, iid_data):
        d, _ = iid_data
        assert self.run(d, {"name": "WRCP", "alpha": 0.1, "rho": [0.0, 0.01, 0.05]}) == 0
        t = io.read_table(d / "pred/intervals.csv", io.INTERVAL_TYPES)
        assert list(t) == cli.INTERVAL_FIELDS
        assert t["rho"].tolist() == [0.0] * 400 + [0.01] * 400 + [0.05] * 400
        assert t["index"].tolist() == list(range(400)) * 3
        assert set(t["fold"].tolist()) == {0, 1}
        assert np.all(t["threshold"][800:] >= t["threshold"][:400])

    def test_dwrcp(self, iid_data):
        d, _ = iid_data
        assert self.run(d, {"name": "D-WRCP", "alpha": 0.1, "rho": 0.01}) == 0

    def test_malformed_row(self, iid_data, capsys):
        d, _ = iid_data
        lines = (d / "test.csv").read_text(encoding="utf-8").splitlines()
        lines[5] = "1.0,abc,2.0,3.0"
        (d / "test.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        assert self.run(d, {"name": "CP", "alpha": 0.1}) == cli.EXIT_DATA
        assert "test.csv:6" in capsys.readouterr().err

    def test_too_few_rows(self, tmp_path):
        io.write_table(tmp_path / "train.csv", {"x0": [1.0], "y": [1.0]})
        io.write_table(tmp_path / "test.csv", {"x0": [1.0, 2.0]})
        assert self.run(tmp_path, {"name": "CP", "alpha": 0.1}) == cli.EXIT_DATA

    def test_missing_input(self, tmp_path):
        cfg = config(tmp_path, method={"name": "CP", "alpha": 0.1})
        rc = cli.run(["predict", "--config", cfg, "--train", str(tmp_path / "a.csv"), "--test", str(tmp_path / "b.csv")])
        assert rc == cli.EXIT_DATA

    def test_unknown_method(self, iid_data, capsys):
        d, _ = iid_data
        assert self.run(d, {"name": "FOO", "alpha": 0.1}) == cli.EXIT_CONFIG
        assert "valid methods" in capsys.readouterr().err

    def test_numerical_failure(self, tmp_path):
        rng = np.random.default_rng(0)
        io.write_table(tmp_path / "train.csv", {"x0": rng.normal(size=40), "y": np.tile([1e300, -1e300], 20)})
        io.write_table(tmp_path / "test.csv", {"x0": rng.normal(size=4)})
        assert self.run(tmp_path, {"name": "CP", "alpha": 0.1}) == cli.EXIT_NUMERIC


class TestSensitivity:
    def write(self, d, n=1000, propensity="logistic", confounded=True, seed=0):
        rng = np.random.default_rng(seed)
        X, T, y, y0, y1, _ = simulate_observational(n, rng, propensity=propensity, confounded=confounded)
        io.write_table(d / "obs.csv", io.Dataset(X, y, T).columns())
        Xt, Tt, _, _, y1t, _ = simulate_observational(2000, rng, propensity=propensity, confounded=confounded)
        return X, T, Xt, Tt, y1t

    def run(self, d, method, sens):
        cfg = config(d, "s.yaml", method=method, sensitivity=sens)
        return cli.run(["sensitivity", "--config", cfg, "--observational", str(d / "obs.csv"),
                        "--targets", str(d / "tgt.csv"), "--out", str(d / "out")])

    def test_weights_follow_table(self, tmp_path):
        X, T, Xt, Tt, y1t = self.write(tmp_path)
        io.write_table(tmp_path / "tgt.csv", io.Dataset(Xt[Tt == 0]).columns())
        assert self.run(tmp_path, {"name": "WCP", "alpha": 0.1}, {"t1": 1, "t2": 0}) == 0
        t = io.read_table(tmp_path / "out/intervals.csv", {"estimand": str, "population": str, "method": str,
                                                           "divergence": str, "index": int, "is_infinite": bool})
        p1 = float(np.mean(T[make_split_plan(len(X), 0, 0).tr0] == 1))
        e = t["propensity"]
        assert np.allclose(t["weight"], (1 - e) / e * p1 / (1 - p1), rtol=1e-12)
        assert np.allclose(t["weight"], sensitivity_weight(SensitivityTarget(1, 0), e, ArmRates(p1)))
        assert set(t["estimand"].tolist()) == {"Y1"} and set(t["population"].tolist()) == {"0"}

    def test_missing_treatment_column(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        io.write_table(tmp_path / "obs.csv", {"x0": rng.normal(size=10), "y": rng.normal(size=10)})
        io.write_table(tmp_path / "tgt.csv", {"x0": rng.normal(size=10)})
        assert self.run(tmp_path, {"name": "WCP", "alpha": 0.1}, {"t1": 1, "t2": 0}) == cli.EXIT_DATA
        assert "treatment column 't'" in capsys.readouterr().err

    def test_randomized_matches_predict_on_arm(self, tmp_path):
        X, T, Xt, Tt, y1t = self.write(tmp_path, propensity="constant", confounded=False)
        io.write_table(tmp_path / "tgt.csv", io.Dataset(Xt, y1t).columns())
        assert self.run(tmp_path, {"name": "WCP", "alpha": 0.1}, {"t1": 1, "t2": 1}) == 0
        sens_cov = coverage_of(tmp_path / "out/intervals.csv", y1t)

        obs = io.read_dataset(tmp_path / "obs.csv", need_y=True, need_t=True)
        arm = obs.t == 1
        io.write_table(tmp_path / "train.csv", io.Dataset(obs.X[arm], obs.y[arm]).columns())
        io.write_table(tmp_path / "test.csv", io.Dataset(Xt).columns())
        cfg = config(tmp_path, "p.yaml", method={"name": "CP", "alpha": 0.1})
        assert cli.run(["predict", "--config", cfg, "--train", str(tmp_path / "train.csv"),
                        "--test", str(tmp_path / "test.csv"), "--out", str(tmp_path / "pred")]) == 0
        pred_cov = coverage_of(tmp_path / "pred/intervals.csv", y1t)
        assert abs(sens_cov - 0.9) < 0.04 and abs(pred_cov - 0.9) < 0.04
        assert abs(sens_cov - pred_cov) < 0.04

    def test_ite_mode(self, tmp_path):
        self.write(tmp_path, n=600)
        rng = np.random.default_rng(1)
        io.write_table(tmp_path / "tgt.csv", io.Dataset(rng.normal(size=(5, 5))).columns())
        assert self.run(tmp_path, {"name": "WRCP", "alpha": 0.1, "rho": [0.04]},
                        {"t1": 1, "t2": "whole", "ite": True, "budget_split": [0.04, 0.06]}) == 0
        t = io.read_table(tmp_path / "out/intervals.csv", {"estimand": str, "population": str, "method": str,
                                                           "divergence": str, "index": int, "is_infinite": bool})
        assert set(t["estimand"].tolist()) == {"ITE"} and np.all(np.isnan(t["weight"]))

    def test_rejects_dwrcp(self, tmp_path):
        self.write(tmp_path, n=100)
        io.write_table(tmp_path / "tgt.csv", {f"x{j}": [0.0] for j in range(5)})
        assert self.run(tmp_path, {"name": "D-WRCP", "alpha": 0.1}, {"t1": 1, "t2": 0}) == cli.EXIT_CONFIG


class TestExperiment:
    EXP = {"n_runs": 2, "rho_grid": [0.01, 0.02], "methods": ["CP"]}
    SIM = {**SIM, "n_train": 100, "n_test": 100}

    def test_outputs_and_resume(self, tmp_path, monkeypatch):
        out = str(tmp_path / "res")
        cfg = config(tmp_path, simulation=self.SIM, experiment=self.EXP)
        assert cli.run(["experiment", "--config", cfg, "--out", out]) == 0
        first = io.read_table(tmp_path / "res/report.csv", {"method": str, "divergence": str, "n_runs": int})
        assert list(first) == cli.REPORT_FIELDS and first["method"].tolist() == ["CP", "CP"]

        seen = []
        real = cli.run_experiment

        def spy(sim, jobs=None, skip=frozenset(), **kw):
            seen.append(set(skip))
            return real(sim, jobs=jobs, skip=skip, **kw)

        monkeypatch.setattr(cli, "run_experiment", spy)
        cfg2 = config(tmp_path, "c2.yaml", simulation=self.SIM, experiment={**self.EXP, "methods": ["CP", "WRCP"]})
        assert cli.run(["experiment", "--config", cfg2, "--out", out, "--resume"]) == 0
        assert seen == [{("CP", "none", 0.01), ("CP", "none", 0.02)}]
        report = json.loads((tmp_path / "res/report.json").read_text(encoding="utf-8"))
        assert [r["method"] for r in report["rows"]] == ["CP", "CP", "WRCP", "WRCP"]

        fresh = str(tmp_path / "fresh")
        monkeypatch.setattr(cli, "run_experiment", real)
        assert cli.run(["experiment", "--config", cfg2, "--out", fresh]) == 0
        for f in ("report.csv", "report.json"):
            assert (tmp_path / "res" / f).read_bytes() == (tmp_path / "fresh" / f).read_bytes()

    def test_resume_refuses_other_config(self, tmp_path):
        out = str(tmp_path / "res")
        assert cli.run(["experiment", "--config", config(tmp_path, simulation=self.SIM, experiment=self.EXP),
                        "--out", out]) == 0
        other = config(tmp_path, "o.yaml", simulation={**self.SIM, "eta": 0.1}, experiment=self.EXP)
        assert cli.run(["experiment", "--config", other, "--out", out, "--resume"]) == cli.EXIT_CONFIG

    def test_unknown_method(self, tmp_path, capsys):
        cfg = config(tmp_path, simulation=self.SIM, experiment={**self.EXP, "methods": ["CP", "XYZ"]})
        assert cli.run(["experiment", "--config", cfg, "--out", str(tmp_path / "r")]) == cli.EXIT_CONFIG
        assert "valid methods: CP, WCP, RCP, WRCP, D-WRCP" in capsys.readouterr().err

    def test_jobs_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ROBUST_CONFORMAL_JOBS", "2")
        seen = []
        real = cli.run_experiment
        monkeypatch.setattr(cli, "run_experiment", lambda sim, jobs=None, **kw: seen.append(jobs) or real(sim, jobs=jobs, **kw))
        cfg = config(tmp_path, simulation=self.SIM, experiment=self.EXP)
        assert cli.run(["experiment", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
        assert cli.run(["experiment", "--config", cfg, "--out", str(tmp_path / "r2"), "--jobs", "1"]) == 0
        assert seen == [2, 1]


def test_module_entry_point(tmp_path):
    cfg = config(tmp_path, simulation={**SIM, "n_train": 20, "n_test": 20})
    proc = subprocess.run([sys.executable, "-m", "robust_conformal", "simulate", "--config", cfg,
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o/source.csv").is_file()
