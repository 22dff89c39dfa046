import numpy as np
import pytest

from nrba.errors import ConfigError
from nrba.simulate import CohortScenario, simulate_cohort


class TestScenarioValidation:
    def test_wave_effects_length(self):
        with pytest.raises(ConfigError):
            CohortScenario(n_waves=3, wave_effects=(1.0, 2.0)).validate()

    def test_group_fields_aligned(self):
        with pytest.raises(ConfigError):
            CohortScenario(group_levels=("A", "B"), group_probs=(1.0,),
                           group_effects=(0.0, 1.0)).validate()

    def test_probs_sum_to_one(self):
        with pytest.raises(ConfigError):
            CohortScenario(group_levels=("A", "B"), group_probs=(0.5, 0.4),
                           group_effects=(0.0, 1.0)).validate()

    def test_unknown_mechanism(self):
        with pytest.raises(ConfigError):
            CohortScenario(mechanism="mixed").validate()

    def test_negative_sd(self):
        with pytest.raises(ConfigError):
            CohortScenario(sigma_u=-1.0).validate()


class TestGeneration:
    def test_mcar_rate_zero_is_complete(self):
        data, truth = simulate_cohort(
            CohortScenario(n=60, mechanism="mcar", mcar_rate=0.0, seed=3))
        assert (data.response == 1).all()
        assert not data.df.filter(like="y_w").isna().any().any()

    def test_pattern_always_monotone(self):
        for mech in ("mcar", "mar", "mnar"):
            data, _ = simulate_cohort(
                CohortScenario(n=200, mechanism=mech, delta=0.5, seed=4))
            assert data.is_monotone()

    def test_replay_identical(self):
        sc = CohortScenario(n=150, seed=11, base_weight_sd=0.2,
                            item_missing_rate=0.05)
        d1, t1 = simulate_cohort(sc)
        d2, t2 = simulate_cohort(sc)
        assert d1.df.equals(d2.df)
        assert (d1.response == d2.response).all()
        assert t1.complete_df.equals(t2.complete_df)

    def test_mnar_delta_zero_equals_mar_cell_for_cell(self):
        mar, _ = simulate_cohort(CohortScenario(n=200, mechanism="mar", seed=5))
        mnar, _ = simulate_cohort(
            CohortScenario(n=200, mechanism="mnar", delta=0.0, shift_k=0.0,
                           seed=5))
        assert mar.df.equals(mnar.df)
        assert (mar.response == mnar.response).all()

    def test_complete_mean_matches_analytic_truth(self):
        # complete-data mean of Y_T vs the analytic growth-curve mean,
        # averaged over replicates against the Monte Carlo SE
        sc0 = CohortScenario(n=2000)
        target = sc0.analytic_mean(sc0.n_waves)
        means = []
        for seed in range(60):
            _, truth = simulate_cohort(CohortScenario(n=2000, seed=seed))
            means.append(truth.mean_by_wave[-1])
        means = np.asarray(means)
        mc_se = means.std(ddof=1) / np.sqrt(len(means))
        assert abs(means.mean() - target) < 3 * mc_se

    def test_shift_k_moves_only_dropouts(self):
        base = CohortScenario(n=400, mechanism="mnar", shift_k=0.0, seed=9)
        shifted = CohortScenario(n=400, mechanism="mnar", shift_k=-1.2, seed=9)
        d0, t0 = simulate_cohort(base)
        d1, t1 = simulate_cohort(shifted)
        assert (t0.dropout_wave == t1.dropout_wave).all()
        completers = t1.dropout_wave > base.n_waves
        assert t0.complete_df.loc[completers].equals(
            t1.complete_df.loc[completers])
        # the shift is negative at the dropout wave for every dropout
        for t in range(1, base.n_waves + 1):
            at_t = t1.dropout_wave == t
            if at_t.any():
                diff = (t1.complete_df.loc[at_t, f"y_w{t}"]
                        - t0.complete_df.loc[at_t, f"y_w{t}"])
                assert (diff < 0).all()

    def test_truth_record_consistent(self):
        data, truth = simulate_cohort(CohortScenario(n=120, seed=6))
        # observed cells equal the complete-data cells
        for t in range(data.n_waves + 1):
            resp = data.response[:, t] == 1
            obs = data.df.loc[resp, f"y_w{t}"]
            assert np.allclose(obs, truth.complete_df.loc[resp, f"y_w{t}"])
        # dropout wave consistent with the response matrix
        dw = data.dropout_wave()
        assert (dw == truth.dropout_wave).all()

    def test_base_weights_positive_mean_one(self):
        data, _ = simulate_cohort(CohortScenario(n=4000, seed=7,
                                                 base_weight_sd=0.5))
        bw = data.base_weights
        assert (bw > 0).all()
        assert abs(bw.mean() - 1.0) < 0.05
