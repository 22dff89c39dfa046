import numpy as np
import pytest

from nrba.errors import ConfigError
from nrba.estimate import VALID_TAGS, estimate_table
from nrba.models import AnalysisFormula
from nrba.simulate import CohortScenario, simulate_cohort
from nrba.weighting import PropensityModelSpec

TREE = PropensityModelSpec(kind="tree")
FORMULA = AnalysisFormula(outcome="y", numeric_terms=("z", "x"),
                          nominal_terms=("group",), wave_dummies=True)


def one_est(table, method, estimand):
    rows = table.rows(method=method, estimand=estimand)
    assert len(rows) == 1
    return rows[0]["est"]


class TestValidation:
    def test_unknown_tag_lists_valid_tags(self, fixture_data):
        with pytest.raises(ConfigError) as err:
            estimate_table(fixture_data, ["CCA", "MI-robust"])
        msg = str(err.value)
        assert "MI-robust" in msg
        for tag in VALID_TAGS:
            assert tag in msg

    def test_model_methods_need_formula(self, fixture_data):
        with pytest.raises(ConfigError, match="formula"):
            estimate_table(fixture_data, ["ML"])


@pytest.fixture(scope="module")
def complete():
    data, _ = simulate_cohort(
        CohortScenario(n=200, seed=12, mechanism="mcar", mcar_rate=0.0,
                       base_weight_sd=0.0))
    return data


@pytest.fixture(scope="module")
def mar():
    data, truth = simulate_cohort(
        CohortScenario(n=900, seed=7, hazard_prev=-0.10, base_weight_sd=0.3))
    return data, truth


class TestCompleteDataCollapse:
    def test_all_mean_methods_agree(self, complete):
        methods = ["CCA", "ACA", "CCA-base-w", "ACA-base-w", "CCA-attr-w",
                   "ACA-attr-w", "ACA-seq-attr-w", "MI-seq", "MI-offset"]
        table = estimate_table(complete, methods, weight_model=TREE,
                               m=2, seed=0)
        for t in range(complete.n_waves + 1):
            ests = [r["est"] for r in table.rows(estimand=f"mean:w{t}")]
            assert len(ests) >= 9 + 2   # MI-offset emits one row per k
            assert max(ests) - min(ests) < 1e-8

    def test_weighted_models_collapse_to_unweighted(self, complete):
        table = estimate_table(complete, ["ML", "w-ML", "GEE", "w-GEE"],
                               formula=FORMULA, weight_model=TREE)
        for base, weighted in (("ML", "w-ML"), ("GEE", "w-GEE")):
            b = {r["estimand"]: r["est"] for r in table.rows(method=base)}
            w = {r["estimand"]: r["est"] for r in table.rows(method=weighted)}
            assert b.keys() == w.keys()
            for k in b:
                assert b[k] == pytest.approx(w[k], abs=1e-8)

    def test_cca_is_plain_mean_of_completers(self, complete):
        table = estimate_table(complete, ["CCA"])
        t = complete.n_waves
        assert one_est(table, "CCA", f"mean:w{t}") == pytest.approx(
            complete.df[f"y_w{t}"].mean(), abs=1e-12)


class TestMissingDataMethods:
    def test_cca_differs_from_aca_under_dropout(self, mar):
        data, _ = mar
        table = estimate_table(data, ["CCA", "ACA"])
        assert one_est(table, "CCA", "mean:w1") != pytest.approx(
            one_est(table, "ACA", "mean:w1"), abs=1e-6)

    def test_mi_offset_means_decrease_in_k(self, mar):
        data, _ = mar
        table = estimate_table(data, ["MI-offset"], m=3, seed=1,
                               offsets=(-0.8, -1.2, -1.6))
        for t in range(1, data.n_waves + 1):
            ests = [one_est(table, f"MI-offset(k={k:g})", f"mean:w{t}")
                    for k in (-0.8, -1.2, -1.6)]
            assert ests[0] > ests[1] > ests[2]

    def test_adjustments_reduce_cca_bias_most_replicates(self):
        wins_w = wins_mi = 0
        reps = 10
        for seed in range(reps):
            sc = CohortScenario(n=1000, seed=seed, hazard_intercept=-2.55,
                                hazard_z=-0.4, hazard_prev=-0.10)
            data, truth = simulate_cohort(sc)
            table = estimate_table(data, ["CCA", "ACA-seq-attr-w", "MI-seq"],
                                   weight_model=TREE, m=3, seed=seed)
            t = data.n_waves
            target = truth.mean_by_wave[t]
            cca = abs(one_est(table, "CCA", f"mean:w{t}") - target)
            seq = abs(one_est(table, "ACA-seq-attr-w", f"mean:w{t}") - target)
            mi = abs(one_est(table, "MI-seq", f"mean:w{t}") - target)
            wins_w += cca > seq
            wins_mi += cca > mi
        assert wins_w >= 8
        assert wins_mi >= 8

    def test_subgroup_rows(self, mar):
        data, _ = mar
        table = estimate_table(data, ["ACA"], subgroup="group")
        t = 2
        overall = table.rows(method="ACA", estimand=f"mean:w{t}")
        assert len(overall) == 1
        for level in ("A", "B", "C"):
            rows = table.rows(method="ACA",
                              estimand=f"mean:w{t}|group={level}")
            assert len(rows) == 1
            # subgroup mean equals the plain mean of that group's responders
            resp = data.response[:, t] == 1
            mask = resp & (data.df["group"] == level).to_numpy()
            y = data.df.loc[mask, f"y_w{t}"].to_numpy()
            assert rows[0]["est"] == pytest.approx(y.mean(), abs=1e-10)

    def test_rows_carry_cis(self, mar):
        data, _ = mar
        table = estimate_table(data, ["ACA-base-w"])
        for r in table.rows(method="ACA-base-w"):
            assert r["lower"] < r["est"] < r["upper"]
            assert r["se"] > 0

    def test_csv_roundtrip(self, mar, tmp_path):
        import pandas as pd
        data, _ = mar
        table = estimate_table(data, ["CCA", "ACA"])
        path = tmp_path / "estimates.csv"
        table.to_csv(path)
        back = pd.read_csv(path)
        assert list(back.columns) == ["method", "estimand", "est", "se",
                                      "lower", "upper"]
        assert len(back) == len(table.frame)

    def test_mi_seq_emits_pooled_coefficients(self, mar):
        data, _ = mar
        table = estimate_table(data, ["MI-seq"], formula=FORMULA, m=2, seed=3)
        coef_rows = [r for r in table.rows(method="MI-seq")
                     if r["estimand"].startswith("coef:")]
        names = {r["estimand"] for r in coef_rows}
        assert "coef:(intercept)" in names and "coef:z" in names
