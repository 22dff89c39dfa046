"""Synthetic longitudinal cohort generator with controllable dropout.

Outcomes follow a random-intercept growth model, generated sequentially via
its exact Gaussian conditionals so that MNAR variants can shift the outcome
at the dropout wave and propagate the shift through later waves the same way
a sequential imputer would condition on it.

Dropout is a per-wave logistic hazard applied to units still in the study,
so the resulting pattern is always monotone. Mechanisms:

  mcar  constant hazard per wave
  mar   hazard on the baseline covariate, group, and the lag-1 outcome
  mnar  mar hazard plus `delta` times the current standardized innovation,
        and/or a pattern-mixture shift of `shift_k` residual SDs added to
        the outcome at the dropout wave (the complete-data record keeps the
        shifted trajectory)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from .errors import ConfigError
from .panel import PanelDataset, VariableSpec


@dataclass
class CohortScenario:
    n: int = 500
    n_waves: int = 5
    n_clusters: int | None = None       # None: every unit its own cluster
    seed: int = 0

    # growth model
    intercept: float = 50.0
    wave_effects: tuple = (4.0, 8.0, 12.0, 16.0, 20.0)
    group_levels: tuple = ("A", "B", "C")
    group_probs: tuple = (0.5, 0.3, 0.2)
    group_effects: tuple = (0.0, -3.0, 2.0)
    beta_z: float = 2.0                 # standard-normal baseline covariate
    beta_x: float = 0.3                 # time-varying covariate, x = 0.5 z + noise
    sigma_u: float = 3.0                # random-intercept SD
    sigma_e: tuple | float = 4.0        # residual SD, scalar or per group

    # dropout
    mechanism: str = "mar"              # "mcar" | "mar" | "mnar"
    mcar_rate: float = 0.1
    hazard_intercept: float = -2.2
    hazard_z: float = -0.3
    hazard_prev: float = -0.08          # on the centered lag-1 outcome
    hazard_group: tuple = (0.0, 0.0, 0.0)
    delta: float = 0.0                  # mnar: hazard loading on current innovation
    shift_k: float = 0.0                # mnar: pattern-mixture shift in residual SDs

    # nuisance
    base_weight_sd: float = 0.0         # lognormal base weights, mean 1
    item_missing_rate: float = 0.0      # MCAR holes in covariates at observed waves

    def validate(self):
        if self.n <= 0 or self.n_waves < 1:
            raise ConfigError("scenario needs n > 0 and n_waves >= 1")
        if len(self.wave_effects) != self.n_waves:
            raise ConfigError("wave_effects must have one entry per follow-up wave")
        k = len(self.group_levels)
        if len(self.group_probs) != k or len(self.group_effects) != k:
            raise ConfigError("group probs/effects must match group levels")
        if abs(sum(self.group_probs) - 1.0) > 1e-9:
            raise ConfigError("group probabilities must sum to 1")
        if self.mechanism not in ("mcar", "mar", "mnar"):
            raise ConfigError(f"unknown dropout mechanism {self.mechanism!r}")
        if not 0.0 <= self.mcar_rate <= 1.0:
            raise ConfigError("mcar_rate must lie in [0, 1]")
        if not 0.0 <= self.item_missing_rate <= 1.0:
            raise ConfigError("item_missing_rate must lie in [0, 1]")
        sig = self.sigma_e_by_group()
        if self.sigma_u < 0 or (sig < 0).any():
            raise ConfigError("SDs must be nonnegative")
        if len(self.hazard_group) != k:
            raise ConfigError("hazard_group must match group levels")
        return self

    def sigma_e_by_group(self):
        if np.isscalar(self.sigma_e):
            return np.full(len(self.group_levels), float(self.sigma_e))
        return np.asarray(self.sigma_e, dtype=float)

    def schema(self):
        return [
            VariableSpec("cluster", "numeric", "cluster"),
            VariableSpec("bw", "numeric", "weight"),
            VariableSpec("group", "nominal", "invariant", self.group_levels),
            VariableSpec("z", "numeric", "invariant"),
            VariableSpec("x", "numeric", "covariate"),
            VariableSpec("y", "numeric", "outcome"),
        ]

    def analytic_mean(self, wave):
        """Complete-data mean of Y at a wave (exact under mcar/mar)."""
        mu = self.intercept + (self.wave_effects[wave - 1] if wave >= 1 else 0.0)
        return mu + float(np.dot(self.group_probs, self.group_effects))


@dataclass
class CohortTruth:
    scenario: CohortScenario
    complete_df: pd.DataFrame           # wide table with no missing cells
    dropout_wave: np.ndarray            # T+1 for completers
    mean_by_wave: np.ndarray            # empirical complete-data outcome means


def _wave_rngs(seed, n_waves):
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(n_waves + 2)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def simulate_cohort(scenario):
    """Generate (PanelDataset, CohortTruth); pure function of the scenario."""
    sc = scenario.validate()
    n, T = sc.n, sc.n_waves
    rngs = _wave_rngs(sc.seed, T)
    rng0 = rngs[0]

    # time-invariant structure
    group_idx = rng0.choice(len(sc.group_levels), size=n, p=sc.group_probs)
    z = rng0.standard_normal(n)
    if sc.n_clusters is None:
        cluster = np.arange(n)
    else:
        cluster = rng0.integers(0, sc.n_clusters, size=n)
    if sc.base_weight_sd > 0:
        s2 = np.log1p(sc.base_weight_sd**2)
        bw = np.exp(rng0.standard_normal(n) * np.sqrt(s2) - s2 / 2)
    else:
        bw = np.ones(n)

    sig_e = sc.sigma_e_by_group()[group_idx]
    geff = np.asarray(sc.group_effects)[group_idx]
    heff = np.asarray(sc.hazard_group)[group_idx]
    tau2 = sc.sigma_u**2

    x = np.empty((n, T + 1))
    y = np.empty((n, T + 1))
    mu = np.empty((n, T + 1))
    resid_sum = np.zeros(n)
    dropout = np.full(n, T + 1, dtype=int)
    in_study = np.ones(n, dtype=bool)
    response = np.ones((n, T + 1), dtype=int)

    for t in range(T + 1):
        rng = rngs[t + 1]
        x[:, t] = 0.5 * z + rng.standard_normal(n)
        wave_eff = sc.wave_effects[t - 1] if t >= 1 else 0.0
        mu[:, t] = sc.intercept + wave_eff + geff + sc.beta_z * z + sc.beta_x * x[:, t]

        # exact conditional of Y_t given history under the random-intercept model
        lam = t * tau2 / (sig_e**2 + t * tau2) if t > 0 else np.zeros(n)
        cond_mean = mu[:, t] + (lam * resid_sum / t if t > 0 else 0.0)
        v_post = tau2 * sig_e**2 / (sig_e**2 + t * tau2) if t > 0 \
            else np.full(n, tau2)
        cond_sd = np.sqrt(v_post + sig_e**2)
        innov = rng.standard_normal(n)
        y[:, t] = cond_mean + cond_sd * innov

        if t >= 1:
            if sc.mechanism == "mcar":
                p_drop = np.full(n, sc.mcar_rate)
            else:
                prev_resid = y[:, t - 1] - mu[:, t - 1]
                eta = (sc.hazard_intercept + sc.hazard_z * z
                       + sc.hazard_prev * prev_resid + heff)
                if sc.mechanism == "mnar":
                    eta = eta + sc.delta * innov
                p_drop = expit(eta)
            u = rng.uniform(size=n)
            newly_dropped = in_study & (u < p_drop)
            if sc.mechanism == "mnar" and sc.shift_k != 0.0:
                y[newly_dropped, t] += sc.shift_k * cond_sd[newly_dropped]
            dropout[newly_dropped] = t
            in_study = in_study & ~newly_dropped
            response[:, t] = in_study.astype(int)

        resid_sum = resid_sum + (y[:, t] - mu[:, t])

    cols = {
        "unit_id": np.array([f"u{i:05d}" for i in range(n)]),
        "cluster": cluster.astype(float),
        "bw": bw,
        "group": pd.Categorical(np.asarray(sc.group_levels)[group_idx],
                                categories=list(sc.group_levels)),
        "z": z,
    }
    complete = pd.DataFrame(cols)
    observed = pd.DataFrame(cols)
    rng_item = rngs[-1]
    for t in range(T + 1):
        complete[f"x_w{t}"] = x[:, t]
        complete[f"y_w{t}"] = y[:, t]
        resp = response[:, t] == 1
        xo = np.where(resp, x[:, t], np.nan)
        if sc.item_missing_rate > 0 and t >= 1:
            holes = resp & (rng_item.uniform(size=n) < sc.item_missing_rate)
            xo = np.where(holes, np.nan, xo)
        observed[f"x_w{t}"] = xo
        observed[f"y_w{t}"] = np.where(resp, y[:, t], np.nan)

    data = PanelDataset(df=observed, schema=sc.schema(), n_waves=T,
                        response=response)
    truth = CohortTruth(scenario=sc, complete_df=complete,
                        dropout_wave=dropout, mean_by_wave=y.mean(axis=0))
    return data, truth
