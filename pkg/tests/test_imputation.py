import numpy as np
import pandas as pd
import pytest

from nrba.errors import DataError
from nrba.imputation import (ImputerSpec, apply_offset, impute_item_nonresponse,
                             pmm_draw, pool, sequential_mi)
from nrba.panel import PanelDataset, VariableSpec
from nrba.simulate import CohortScenario, simulate_cohort


def panel_with_covariate(y, x, z=None, groups=None):
    y = np.asarray(y, dtype=float)
    n, tp1 = y.shape
    schema = [
        VariableSpec("cl", "numeric", "cluster"),
        VariableSpec("bw", "numeric", "weight"),
        VariableSpec("z", "numeric", "invariant"),
        VariableSpec("x", "numeric", "covariate"),
        VariableSpec("y", "numeric", "outcome"),
    ]
    if groups is not None:
        schema.insert(2, VariableSpec("g", "nominal", "invariant",
                                      tuple(sorted(set(groups)))))
    df = pd.DataFrame({
        "unit_id": [f"u{i}" for i in range(n)],
        "cl": np.arange(n, dtype=float),
        "bw": np.ones(n),
        "z": np.zeros(n) if z is None else np.asarray(z, float),
    })
    if groups is not None:
        df["g"] = list(groups)
    for t in range(tp1):
        df[f"x_w{t}"] = np.asarray(x, float)[:, t]
        df[f"y_w{t}"] = y[:, t]
    response = (~np.isnan(y)).astype(int)
    return PanelDataset(df=df, schema=schema, n_waves=tp1 - 1,
                        response=response)


class TestPooling:
    def test_identical_points(self):
        p = pool([2.0, 2.0, 2.0], [0.5, 0.5, 0.5])
        assert p.between == 0.0
        assert p.variance == pytest.approx(p.within)

    def test_hand_case(self):
        p = pool([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
        assert p.estimate == pytest.approx(3.0)
        assert p.between == pytest.approx(2.5)
        assert p.variance == pytest.approx(3.0)

    def test_independent_oracle(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=5)
        u = rng.uniform(0.1, 1.0, size=5)
        p = pool(q, u)
        m = 5
        qbar = sum(q) / m
        b = sum((qi - qbar) ** 2 for qi in q) / (m - 1)
        t = sum(u) / m + (1 + 1 / m) * b
        df = (m - 1) * (1 + (sum(u) / m) / ((1 + 1 / m) * b)) ** 2
        assert abs(p.estimate - qbar) < 1e-12
        assert abs(p.variance - t) < 1e-12
        assert abs(p.df - df) < 1e-9

    def test_permutation_and_scaling(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=4)
        u = rng.uniform(0.1, 1.0, size=4)
        assert pool(q, u).variance == pytest.approx(
            pool(q[::-1], u[::-1]).variance, abs=1e-14)
        c = 3.7
        assert pool(c * q, c**2 * u).estimate == pytest.approx(
            c * pool(q, u).estimate)
        assert pool(c * q, c**2 * u).between == pytest.approx(
            c**2 * pool(q, u).between)

    def test_m_below_two(self):
        with pytest.raises(DataError):
            pool([1.0], [0.1])


class TestPmm:
    def test_k1_nearest_donor(self):
        rng = np.random.default_rng(2)
        vals = pmm_draw(np.array([0.31]), np.array([0.1, 0.3, 0.9]),
                        np.array([10.0, 20.0, 30.0]), 1, rng)
        assert vals[0] == 20.0

    def test_constant_donors(self):
        rng = np.random.default_rng(3)
        vals = pmm_draw(np.linspace(0, 1, 8), np.linspace(0, 1, 20),
                        np.full(20, 7.5), 5, rng)
        assert (vals == 7.5).all()

    def test_donor_sets_match_bruteforce(self):
        rng = np.random.default_rng(4)
        donor_pred = rng.normal(size=10)
        donor_vals = rng.normal(size=10)
        targets = rng.normal(size=6)
        k = 3
        for tp in targets:
            draws = {pmm_draw(np.array([tp]), donor_pred, donor_vals, k,
                              np.random.default_rng(s))[0]
                     for s in range(200)}
            order = np.argsort(np.abs(donor_pred - tp), kind="stable")
            expect = set(donor_vals[order[:k]])
            assert draws <= expect
            assert len(draws) == k   # all k donors appear across 200 seeds

    def test_small_pool_warns(self):
        rng = np.random.default_rng(5)
        with pytest.warns(UserWarning):
            pmm_draw(np.array([0.0]), np.array([1.0, 2.0]),
                     np.array([5.0, 6.0]), 5, rng)

    def test_range_safety(self):
        rng = np.random.default_rng(6)
        donors = rng.normal(size=30)
        vals = pmm_draw(rng.normal(size=50), rng.normal(size=30), donors,
                        5, rng)
        assert vals.min() >= donors.min() and vals.max() <= donors.max()


class TestItemImputation:
    def test_identity_when_complete(self):
        rng = np.random.default_rng(7)
        y = rng.normal(size=(30, 3))
        x = rng.normal(size=(30, 3))
        data = panel_with_covariate(y, x)
        out = impute_item_nonresponse(data, seed=0)
        assert out.df.equals(data.df)

    def test_deterministic_relation_recovered(self):
        # x duplicates z exactly; a few x holes must be filled near z
        rng = np.random.default_rng(8)
        n = 120
        z = rng.normal(size=n)
        x = np.tile(z[:, None], (1, 2)) + 0.001 * rng.normal(size=(n, 2))
        y = 2 * z[:, None] + rng.normal(size=(n, 2))
        data = panel_with_covariate(y, x, z=z)
        df = data.df.copy()
        holes = [3, 17, 40]
        df.loc[holes, "x_w1"] = np.nan
        data = data.replace(df=df)
        hits = 0
        for seed in range(40):
            out = impute_item_nonresponse(data, seed=seed)
            filled = out.df.loc[holes, "x_w1"].to_numpy()
            hits += int(np.all(np.abs(filled - z[holes]) < 0.25))
        assert hits >= 38

    def test_mcar_holes_mean_recovered(self):
        devs = []
        for seed in range(60):
            rng = np.random.default_rng(1000 + seed)
            n = 300
            z = rng.normal(size=n)
            x = z[:, None] * 0.5 + rng.normal(size=(n, 2))
            y = 5 + x + rng.normal(size=(n, 2))
            data = panel_with_covariate(y, x, z=z)
            pre_mean = data.df["x_w1"].mean()
            df = data.df.copy()
            holes = rng.random(n) < 0.05
            df.loc[holes, "x_w1"] = np.nan
            out = impute_item_nonresponse(data.replace(df=df), seed=seed)
            devs.append(out.df["x_w1"].mean() - pre_mean)
        devs = np.asarray(devs)
        mc_se = devs.std(ddof=1) / np.sqrt(len(devs))
        assert abs(devs.mean()) < 3 * mc_se


class TestSequentialMi:
    def test_observed_cells_preserved_and_complete(self, fixture_data):
        imp = sequential_mi(fixture_data, m=3, seed=0, iterations=3)
        assert imp.m == 3
        for d in imp.datasets:
            for t in range(fixture_data.n_waves + 1):
                resp = fixture_data.response[:, t] == 1
                src = fixture_data.df.loc[resp, f"y_w{t}"]
                assert np.array_equal(d.df.loc[resp, f"y_w{t}"], src)
            assert not d.df.filter(like="y_w").isna().any().any()
            assert not d.df.filter(like="x_w").isna().any().any()

    def test_replay_identical(self, fixture_data):
        a = sequential_mi(fixture_data, m=2, seed=5, iterations=3)
        b = sequential_mi(fixture_data, m=2, seed=5, iterations=3)
        for d1, d2 in zip(a.datasets, b.datasets):
            assert d1.df.equals(d2.df)

    def test_zero_offsets_bit_identical_to_none(self, fixture_data):
        a = sequential_mi(fixture_data, m=2, seed=3, iterations=3)
        b = sequential_mi(fixture_data, m=2, seed=3, iterations=3,
                          offsets=0.0)
        for d1, d2 in zip(a.datasets, b.datasets):
            assert d1.df.equals(d2.df)

    def test_nonmonotone_rejected(self):
        y = np.ones((10, 3))
        y[0, 1] = np.nan
        x = np.zeros((10, 3))
        data = panel_with_covariate(y, x)
        with pytest.raises(DataError, match="monotone"):
            sequential_mi(data, m=2, seed=0)

    def test_offset_shifts_exactly_delta_k_sigma(self):
        data, _ = simulate_cohort(CohortScenario(n=400, seed=21,
                                                 hazard_prev=-0.10))
        m, seed = 2, 4
        a = sequential_mi(data, m=m, seed=seed, offsets=-0.8, iterations=3)
        b = sequential_mi(data, m=m, seed=seed, offsets=-1.6, iterations=3)
        dropout = data.dropout_wave()
        groups = data.df["group"].astype(str).to_numpy()
        for j in range(m):
            for t in range(1, data.n_waves + 1):
                at_t = dropout == t
                if not at_t.any():
                    continue
                diff = (b.datasets[j].df.loc[at_t, f"y_w{t}"]
                        - a.datasets[j].df.loc[at_t, f"y_w{t}"]).to_numpy()
                sig = b.sigma_tables[j][t - 1]
                expect = -0.8 * np.array([sig[g] for g in groups[at_t]])
                assert np.allclose(diff, expect, atol=1e-10)

    def test_pooled_mean_recovers_truth_mar(self):
        devs, ses = [], []
        for seed in range(25):
            data, truth = simulate_cohort(
                CohortScenario(n=700, seed=seed, hazard_prev=-0.10))
            imp = sequential_mi(data, m=3, seed=seed, iterations=3)
            ests = [d.df[f"y_w{data.n_waves}"].mean() for d in imp.datasets]
            devs.append(np.mean(ests) - truth.mean_by_wave[-1])
        devs = np.asarray(devs)
        mc_se = devs.std(ddof=1) / np.sqrt(len(devs))
        assert abs(devs.mean()) < 3 * mc_se


class TestOffset:
    def test_zero_is_identity(self):
        assert apply_offset(4.2, 0.0, 10.0) == 4.2

    def test_direct_product(self):
        assert apply_offset(100.0, -1.2, 10.0) == pytest.approx(88.0)

    def test_small_group_warns_pooled(self):
        data, _ = simulate_cohort(CohortScenario(
            n=500, seed=2, group_probs=(0.97, 0.015, 0.015),
            hazard_prev=-0.10))
        with pytest.warns(UserWarning, match="pooled"):
            sequential_mi(data, m=1, seed=0, offsets=-1.2, iterations=2)
