import filecmp
import json
from pathlib import Path

import pandas as pd
import pytest

from nrba.cli import main
from nrba.panel import load_panel, load_schema, summarize_patterns

DATA_DIR = Path(__file__).parent / "data"


def write_config(path, **cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def fixture_config(tmp_path, out, **extra):
    cfg = {
        "input": str(DATA_DIR / "fixture.csv"),
        "schema": str(DATA_DIR / "fixture_schema.json"),
        "out": str(out),
        "seed": 11,
        "weight_model": {"kind": "tree"},
        "m": 2,
        "iterations": 3,
    }
    cfg.update(extra)
    return write_config(tmp_path / "config.json", **cfg)


def run(command, config, *args):
    return main([command, "--config", config, *args])


class TestConfigValidation:
    def test_unknown_key_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", seed=1, bananas=2)
        assert run("pattern", cfg) == 2
        assert "bananas" in capsys.readouterr().err

    def test_missing_seed_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", methods=["CCA"])
        assert run("pattern", cfg) == 2
        assert "seed" in capsys.readouterr().err

    def test_bad_method_tag_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", seed=1, methods=["CCA", "LOCF"])
        assert run("estimate", cfg) == 2
        assert "LOCF" in capsys.readouterr().err

    def test_offsets_without_mi_methods_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", seed=1, methods=["CCA"],
                           offsets=[-0.8])
        assert run("estimate", cfg) == 2
        assert "offsets" in capsys.readouterr().err

    def test_missing_input_file_exits_2(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", seed=1,
                           input=str(tmp_path / "nope.csv"),
                           schema=str(DATA_DIR / "fixture_schema.json"))
        assert run("pattern", cfg) == 2

    def test_invalid_json_exits_2(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        assert run("pattern", str(p)) == 2

    def test_malformed_data_exits_3(self, tmp_path):
        # unit that re-enters after dropout: load succeeds, pattern summary
        # works, but imputation requires a monotone pattern
        src = pd.read_csv(DATA_DIR / "fixture.csv")
        src.loc[src.index[0], [f"y_w{t}" for t in (1, 2, 3)]] = float("nan")
        bad = tmp_path / "bad.csv"
        src.to_csv(bad, index=False)
        cfg = write_config(tmp_path / "c.json", seed=1, input=str(bad),
                           schema=str(DATA_DIR / "fixture_schema.json"),
                           out=str(tmp_path / "out"), m=2, iterations=2)
        assert run("impute", cfg) == 3


class TestSimulate:
    def test_unknown_scenario_field_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", seed=1,
                           scenario={"n": 50, "dropout": 0.5},
                           out=str(tmp_path / "out"))
        assert run("simulate", cfg) == 2
        assert "dropout" in capsys.readouterr().err

    def test_mcar_rate_zero_is_complete(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path / "c.json", seed=5,
                           scenario={"n": 40, "mechanism": "mcar",
                                     "mcar_rate": 0.0},
                           out=str(out))
        assert run("simulate", cfg) == 0
        data = pd.read_csv(out / "data.csv")
        assert not data.filter(like="y_w").isna().any().any()

    def test_replay_identical_bytes(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            cfg = write_config(tmp_path / f"{name}.json", seed=9,
                               scenario={"n": 60, "base_weight_sd": 0.2,
                                         "item_missing_rate": 0.05},
                               out=str(out))
            assert run("simulate", cfg) == 0
            outs.append(out)
        for f in ("data.csv", "schema.json", "truth.csv", "truth_means.csv"):
            assert filecmp.cmp(outs[0] / f, outs[1] / f, shallow=False)


class TestPattern:
    def test_complete_data_zero_nonresponse(self, tmp_path):
        sim_out = tmp_path / "sim"
        cfg = write_config(tmp_path / "s.json", seed=2,
                           scenario={"n": 40, "mechanism": "mcar",
                                     "mcar_rate": 0.0}, out=str(sim_out))
        assert run("simulate", cfg) == 0
        pat_out = tmp_path / "pat"
        cfg = write_config(tmp_path / "p.json", seed=2,
                           input=str(sim_out / "data.csv"),
                           schema=str(sim_out / "schema.json"),
                           out=str(pat_out))
        assert run("pattern", cfg) == 0
        rates = pd.read_csv(pat_out / "wave_rates.csv")
        assert (rates["rate"] == 0).all()
        patterns = pd.read_csv(pat_out / "patterns.csv")
        assert len(patterns) == 1 and patterns["count"].iloc[0] == 40

    def test_rates_match_library_summary(self, tmp_path, fixture_data):
        out = tmp_path / "out"
        cfg = fixture_config(tmp_path, out)
        assert run("pattern", cfg) == 0
        rates = pd.read_csv(out / "wave_rates.csv")
        summary = summarize_patterns(fixture_data)
        assert rates["rate"].to_numpy() == pytest.approx(
            summary.wave_rates["rate"].to_numpy())

    def test_group_by_emits_group_rates(self, tmp_path):
        out = tmp_path / "out"
        cfg = fixture_config(tmp_path, out, group_by="group")
        assert run("pattern", cfg) == 0
        rates = pd.read_csv(out / "group_rates.csv")
        assert set(rates["group"].astype(str)) == {"A", "B", "C"}


class TestEstimateAndSensitivity:
    def test_cca_equals_aca_on_complete_data(self, tmp_path):
        sim_out = tmp_path / "sim"
        cfg = write_config(tmp_path / "s.json", seed=3,
                           scenario={"n": 50, "mechanism": "mcar",
                                     "mcar_rate": 0.0}, out=str(sim_out))
        assert run("simulate", cfg) == 0
        est_out = tmp_path / "est"
        cfg = write_config(tmp_path / "e.json", seed=3,
                           input=str(sim_out / "data.csv"),
                           schema=str(sim_out / "schema.json"),
                           methods=["CCA", "ACA"], out=str(est_out))
        assert run("estimate", cfg) == 0
        est = pd.read_csv(est_out / "estimates.csv")
        wide = est.pivot(index="estimand", columns="method", values="est")
        assert wide["CCA"].to_numpy() == pytest.approx(
            wide["ACA"].to_numpy(), abs=1e-10)

    def test_no_methods_exits_2(self, tmp_path, capsys):
        cfg = fixture_config(tmp_path, tmp_path / "out", methods=[])
        assert run("estimate", cfg) == 2
        assert "no methods selected" in capsys.readouterr().err

    def test_sensitivity_k_zero_matches_mi_seq(self, tmp_path):
        out = tmp_path / "out"
        cfg = fixture_config(tmp_path, out, methods=["MI-seq"])
        assert run("estimate", cfg) == 0
        sens_out = tmp_path / "sens"
        cfg2 = fixture_config(tmp_path, sens_out, offsets=[0],
                              methods=["MI-offset"])
        assert run("sensitivity", cfg2) == 0
        est = pd.read_csv(out / "estimates.csv")
        sens = pd.read_csv(sens_out / "sensitivity.csv")
        mi = est[est["method"] == "MI-seq"].set_index("estimand")["est"]
        k0 = sens[sens["method"] == "MI-offset(k=0)"].set_index(
            "estimand")["est"]
        for estimand in k0.index:
            assert k0[estimand] == pytest.approx(mi[estimand], abs=1e-12)

    def test_subgroup_table_emitted(self, tmp_path):
        out = tmp_path / "out"
        cfg = fixture_config(tmp_path, out, methods=["ACA"],
                             subgroup="group")
        assert run("estimate", cfg) == 0
        sub = pd.read_csv(out / "estimates_by_group.csv")
        assert set(sub["level"].astype(str)) == {"A", "B", "C"}

    def test_numerical_failure_exits_4(self, tmp_path, capsys):
        # GLM propensities separate on the tiny bundled cohort
        out = tmp_path / "out"
        cfg = fixture_config(tmp_path, out, methods=["ACA-seq-attr-w"],
                             weight_model={"kind": "glm"})
        assert run("estimate", cfg) == 4
        assert "numerical failure" in capsys.readouterr().err


class TestReport:
    def test_report_before_estimate_exits_3(self, tmp_path, capsys):
        cfg = fixture_config(tmp_path, tmp_path / "out", methods=["CCA"])
        assert run("report", cfg) == 3
        assert "estimates.csv" in capsys.readouterr().err

    def test_report_without_methods_exits_2(self, tmp_path):
        cfg = fixture_config(tmp_path, tmp_path / "out")
        assert run("report", cfg) == 2

    def test_report_lists_methods_and_ordered_sweep(self, tmp_path):
        out = tmp_path / "out"
        cfg = fixture_config(tmp_path, out,
                             methods=["CCA", "ACA", "MI-offset"],
                             offsets=[-0.8, -1.2, -1.6])
        assert run("estimate", cfg) == 0
        assert run("sensitivity", cfg) == 0
        assert run("report", cfg) == 0
        text = (out / "report.md").read_text()
        assert "CCA" in text and "ACA" in text
        # the offset sweep appears in decreasing-k order
        assert 0 < text.find("k=-0.8") < text.find("k=-1.2") < text.find("k=-1.6")


PIPELINE = ("pattern", "weights", "impute", "estimate", "sensitivity",
            "report")


def run_pipeline(tmp_path, name, threads=1):
    out = tmp_path / name
    cfg = fixture_config(tmp_path, out,
                         methods=["CCA", "ACA", "ACA-seq-attr-w", "MI-seq",
                                  "MI-offset"],
                         offsets=[-0.8, -1.2, -1.6])
    for command in PIPELINE:
        code = main([command, "--config", cfg, "--threads", str(threads)])
        assert code == 0, command
    return out


class TestDeterminism:
    def test_pipeline_byte_identical_across_runs_and_threads(self, tmp_path):
        a = run_pipeline(tmp_path, "a")
        b = run_pipeline(tmp_path, "b")
        c = run_pipeline(tmp_path, "c", threads=8)
        names = sorted(p.name for p in a.iterdir() if p.name != "manifest.json")
        assert names == sorted(p.name for p in b.iterdir()
                               if p.name != "manifest.json")
        for f in names:
            assert filecmp.cmp(a / f, b / f, shallow=False), f
            assert filecmp.cmp(a / f, c / f, shallow=False), f

    def test_manifest_records_stages_and_config_hash(self, tmp_path):
        out = run_pipeline(tmp_path, "m")
        man = json.loads((out / "manifest.json").read_text())
        assert set(PIPELINE) <= set(man["stages"])
        assert len(man["config_hash"]) == 64

    def test_estimate_reuses_imputed_copies(self, tmp_path):
        out = run_pipeline(tmp_path, "r")
        before = (out / "imputed_m0.csv").read_bytes()
        cfg = fixture_config(tmp_path, out,
                             methods=["CCA", "ACA", "ACA-seq-attr-w",
                                      "MI-seq", "MI-offset"],
                             offsets=[-0.8, -1.2, -1.6])
        assert main(["estimate", "--config", cfg]) == 0
        assert (out / "imputed_m0.csv").read_bytes() == before
