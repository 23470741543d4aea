import json
import math

import numpy as np
import pandas as pd
import pytest

from swjm.cli import _select_grid, main
from swjm.mcharness import build_paper_grid

BASE_CONFIG = {
    "design": {"n_sequences": 4, "n_periods": 5, "clusters_per_sequence": 8,
               "subjects_per_cluster": 50},
    "params": {"period_effects": [30, 30, 30, 30, 30], "treatment_effect": 5,
               "var_alpha": 2, "var_phi": 55, "var_eps": 40},
    "dropout": {"type": "weibull", "log_lambda": -1.5, "log_shape": 0.0, "nu": -0.2,
                "omega_1": math.log(0.9), "omega_2": math.log(0.9)},
    "seed": 7,
}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def small_config(**over):
    doc = json.loads(json.dumps(BASE_CONFIG))
    doc["design"].update(clusters_per_sequence=2, subjects_per_cluster=15)
    doc.update(over)
    return doc


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    cfg = write_config(root / "cfg.json", small_config())
    assert main(["simulate", "--config", cfg, "--out", str(root / "data")]) == 0
    return root / "data"


class TestSimulate:
    def test_base_scenario_counts(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", BASE_CONFIG)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        lon = pd.read_csv(tmp_path / "a" / "longitudinal.csv")
        surv = pd.read_csv(tmp_path / "a" / "survival.csv")
        assert lon.observed.sum() <= 8000
        assert len(surv) <= 2 * 1600
        assert surv.groupby(["cluster_id", "subject_id"]).ngroups == 1600
        prov = json.loads((tmp_path / "a" / "provenance.json").read_text())
        assert prov["config"]["seed"] == 7 and prov["version"]

    def test_no_dropout_counts(self, tmp_path):
        doc = dict(BASE_CONFIG, dropout={"type": "none"})
        cfg = write_config(tmp_path / "cfg.json", doc)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        lon = pd.read_csv(tmp_path / "a" / "longitudinal.csv")
        assert lon.observed.sum() == 8000

    def test_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", small_config())
        for d in ("a", "b"):
            assert main(["simulate", "--config", cfg, "--out", str(tmp_path / d)]) == 0
        for f in ("longitudinal.csv", "survival.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_seed_override(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", small_config())
        main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "8"])
        a = (tmp_path / "a" / "longitudinal.csv").read_bytes()
        assert a != (tmp_path / "b" / "longitudinal.csv").read_bytes()

    @pytest.mark.parametrize("mutate,needle", [
        (lambda d: d["params"].update(var_eps=-1), "var_eps"),
        (lambda d: d.update(extra_key=1), "extra_key"),
        (lambda d: d["design"].pop("n_periods"), "n_periods"),
        (lambda d: d["dropout"].update(typo=1), "dropout"),
    ])
    def test_schema_errors(self, tmp_path, capsys, mutate, needle):
        doc = small_config()
        mutate(doc)
        cfg = write_config(tmp_path / "cfg.json", doc)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) != 0
        err = capsys.readouterr().err
        assert "failed validation" in err and needle in err
        assert not (tmp_path / "a" / "longitudinal.csv").exists()

    def test_invalid_json(self, tmp_path, capsys):
        (tmp_path / "cfg.json").write_text("{not json")
        assert main(["simulate", "--config", str(tmp_path / "cfg.json"),
                     "--out", str(tmp_path / "a")]) != 0
        assert "not valid JSON" in capsys.readouterr().err


class TestFit:
    def test_lmm_round_trip(self, simulated, tmp_path):
        out = tmp_path / "lmm"
        assert main(["fit", str(simulated), "--model", "lmm", "--effect", "constant",
                     "--out", str(out)]) == 0
        est = pd.read_csv(out / "estimates.csv")
        names = list(est.name)
        assert names[:6] == [f"beta_{j}" for j in range(1, 6)] + ["delta"]
        assert {"var_alpha", "var_phi", "var_eps", "rho_a", "rho_d"} <= set(names)
        summary = json.loads((out / "fit_summary.json").read_text())
        assert {"loglik", "converged", "iterations", "reason"} <= set(summary)
        assert (out / "provenance.json").exists()

    def test_joint_equal_association(self, simulated, tmp_path):
        out = tmp_path / "jm"
        assert main(["fit", str(simulated), "--model", "joint", "--effect", "gtot",
                     "--association", "equal", "--out", str(out)]) == 0
        est = pd.read_csv(out / "estimates.csv")
        assert [n for n in est.name if n.startswith("omega")] == ["omega"]
        assert [n for n in est.name if n.startswith("delta")] == \
            ["delta_0", "delta_1", "delta_2", "delta_3"]
        summary = json.loads((out / "fit_summary.json").read_text())
        assert summary["estimates"]["omega_1"] == summary["estimates"]["omega_2"]

    def test_joint_needs_survival(self, simulated, tmp_path, capsys):
        lon = str(simulated / "longitudinal.csv")
        assert main(["fit", lon, "--model", "joint", "--out", str(tmp_path / "x")]) != 0
        assert "survival" in capsys.readouterr().err

    def test_bad_header_names_column(self, simulated, tmp_path, capsys):
        lon = pd.read_csv(simulated / "longitudinal.csv").rename(
            columns={"subject_id": "subjectid"})
        path = tmp_path / "bad.csv"
        lon.to_csv(path, index=False)
        assert main(["fit", str(path), "--out", str(tmp_path / "x")]) != 0
        err = capsys.readouterr().err
        assert "subjectid" in err and "subject_id" in err

    def test_non_converged_exits_zero(self, simulated, tmp_path):
        cfg = write_config(tmp_path / "fit.json", {"max_iter": 1})
        out = tmp_path / "x"
        assert main(["fit", str(simulated), "--config", cfg, "--out", str(out)]) == 0
        assert json.loads((out / "fit_summary.json").read_text())["converged"] is False

    def test_missing_data(self, tmp_path, capsys):
        assert main(["fit", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) != 0
        assert "not found" in capsys.readouterr().err


def scenario_file(tmp_path, n_reps=2):
    doc = [{"label": "tiny_informative", "n_reps": n_reps,
            "config": small_config(seed=0)},
           {"label": "tiny_neutral", "n_reps": n_reps,
            "config": small_config(seed=0, dropout={"type": "none"})}]
    for d in doc:
        d["config"]["design"].update(clusters_per_sequence=1, subjects_per_cluster=6)
    return write_config(tmp_path / "grid.json", doc)


class TestMcsim:
    def test_grid_sizes(self):
        assert len(_select_grid("paper-A", "desk", None)) == 24
        assert len(_select_grid("paper-B", "desk", None)) == 24
        assert len(_select_grid("extra", "desk", None)) == 5
        assert _select_grid("paper-A", "desk", 3)[0].n_reps == 3

    def test_extra_grid_runs(self, tmp_path):
        out = tmp_path / "x"
        assert main(["mcsim", "--grid", "extra", "--scale", "desk", "--reps", "1",
                     "--out", str(out), "--seed", "1"]) == 0
        raw = pd.read_csv(out / "raw_results.csv")
        assert raw.scenario.nunique() == 5
        assert len(json.loads((out / "scenarios.json").read_text())) == 5

    def test_workers_identical_and_resume(self, tmp_path, monkeypatch):
        grid = scenario_file(tmp_path)
        a, b, c = (str(tmp_path / d) for d in "abc")
        assert main(["mcsim", "--grid", grid, "--out", a, "--seed", "5", "--workers", "1"]) == 0
        monkeypatch.setenv("SWJM_WORKERS", "2")
        assert main(["mcsim", "--grid", grid, "--out", b, "--seed", "5"]) == 0
        raw_a = (tmp_path / "a" / "raw_results.csv").read_bytes()
        assert raw_a == (tmp_path / "b" / "raw_results.csv").read_bytes()
        prov = json.loads((tmp_path / "b" / "provenance.json").read_text())
        assert prov["recipe"]["seed"] == 5

        # drop one repetition and resume
        raw = pd.read_csv(tmp_path / "a" / "raw_results.csv", dtype=str)
        (tmp_path / "c").mkdir()
        raw[raw.rep != "2"].to_csv(tmp_path / "c" / "raw_results.csv", index=False)
        (tmp_path / "c" / "provenance.json").write_text(
            (tmp_path / "a" / "provenance.json").read_text())
        assert main(["mcsim", "--grid", grid, "--out", c, "--seed", "5"]) == 0
        assert (tmp_path / "c" / "raw_results.csv").read_bytes() == raw_a

    def test_resume_refuses_other_recipe(self, tmp_path, capsys):
        grid = scenario_file(tmp_path, n_reps=1)
        out = str(tmp_path / "a")
        assert main(["mcsim", "--grid", grid, "--out", out, "--seed", "5"]) == 0
        assert main(["mcsim", "--grid", grid, "--out", out, "--seed", "6"]) != 0
        assert "different run" in capsys.readouterr().err

    def test_bad_workers_env(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("SWJM_WORKERS", "many")
        grid = scenario_file(tmp_path, n_reps=1)
        assert main(["mcsim", "--grid", grid, "--out", str(tmp_path / "a")]) != 0
        assert "SWJM_WORKERS" in capsys.readouterr().err

    def test_unknown_grid(self, tmp_path, capsys):
        assert main(["mcsim", "--grid", "paper-C", "--out", str(tmp_path)]) != 0
        assert "paper-A" in capsys.readouterr().err


class TestSummarize:
    def test_hand_written_rows(self, tmp_path, capsys):
        raw = tmp_path / "raw.csv"
        raw.write_text(
            "scenario,rep,model,estimand,true,estimate,se,ci_lo,ci_hi,converged\n"
            "s,1,JM,delta,5,4.8,0.3,4.2,5.4,1\n"
            "s,2,JM,delta,5,5.1,0.3,4.5,5.7,1\n"
            "s,3,JM,delta,5,5.4,0.3,4.8,6.0,1\n")
        assert main(["summarize", str(raw), "--out", str(tmp_path / "o")]) == 0
        s = pd.read_csv(tmp_path / "o" / "summary.csv").set_index("measure")
        assert list(s.columns) == ["scenario", "model", "estimand", "value", "mcse",
                                   "n_converged"]
        assert s.loc["bias", "value"] == pytest.approx(0.1)
        assert s.loc["rel_bias", "value"] == pytest.approx(0.02)
        assert s.loc["empse", "value"] == pytest.approx(0.3)
        assert s.loc["bias", "mcse"] == pytest.approx(0.3 / np.sqrt(3))
        assert s.loc["coverage", "value"] == 1.0 and s.loc["coverage", "mcse"] == 0.0
        assert "Scenario s" in (tmp_path / "o" / "summary.txt").read_text()
        assert "Scenario s" in capsys.readouterr().out

    def test_bad_raw(self, tmp_path, capsys):
        raw = tmp_path / "raw.csv"
        raw.write_text("scenario,rep\ns,1\n")
        assert main(["summarize", str(raw), "--out", str(tmp_path / "o")]) != 0
        assert "lacks columns" in capsys.readouterr().err


def test_paper_scale_presets_exist():
    grid = build_paper_grid("A", "paper")
    assert grid[0].n_reps == 1000 and grid[0].design.n_clusters == 32
