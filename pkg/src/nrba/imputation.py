"""Sequential monotone multiple imputation with type-specific draw models,
an MNAR offset mechanism, and combining rules for pooled inference.

Wave nonresponse is imputed wave by wave: at wave t the draw models are fit
on responding units conditional on everything through wave t-1 (including
previously imputed values), then missing units are drawn. No across-wave
iteration is needed on monotone data. Item nonresponse within observed
waves is filled first by within-wave chained equations.

Parameter uncertainty uses an approximate Bayesian draw of the coefficients
from the large-sample normal at the MLE (and a scaled inverse-chi-square
draw of the residual variance for numeric models).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ConfigError, DataError
from .glm import DesignBuilder, fit_glm, predict_glm
from .panel import PanelDataset
from .tree import TreeConfig, fit_tree

METHODS = ("logit", "multinomial", "ordinal", "tree", "pmm", "gaussian")
MIN_GROUP_FOR_SIGMA = 10


@dataclass
class ImputerSpec:
    """Per-variable imputation methods and offset configuration.

    Defaults by kind: binary -> logit, nominal -> multinomial, ordinal ->
    ordinal (proportional odds), numeric -> predictive mean matching. A
    numeric variable can be switched to "tree" (donor draws from a
    regression tree, for skewed distributions) or "gaussian".
    """

    methods: dict = field(default_factory=dict)     # variable -> method
    pmm_donors: int = 5
    offset_group: str | None = None       # nominal invariant for sigma_g strata
    tree: TreeConfig = field(default_factory=lambda: TreeConfig(min_leaf=10))
    include_base_weight: bool = True

    def method_for(self, varspec):
        m = self.methods.get(varspec.name)
        if m is not None:
            if m not in METHODS:
                raise ConfigError(f"unknown imputation method {m!r}")
            return m
        return {"binary": "logit", "nominal": "multinomial",
                "ordinal": "ordinal", "numeric": "pmm"}[varspec.kind]


@dataclass
class ImputationSet:
    datasets: list                  # m completed PanelDatasets
    m: int
    iterations: int
    offsets: np.ndarray             # k_t per follow-up wave (zeros = MAR)
    sigma_tables: list              # per copy: list of per-wave {group: sigma}
    seed: int

    def __post_init__(self):
        assert len(self.datasets) == self.m


@dataclass
class PooledEstimate:
    estimate: float                 # Q-bar
    within: float                   # W-bar
    between: float                  # B
    variance: float                 # T = W + (1 + 1/m) B
    df: float
    m: int
    ci: tuple

    @property
    def se(self):
        return float(np.sqrt(self.variance))


def pool(estimates, variances, ci_level=0.95):
    """Combine m completed-data estimates and within-imputation variances."""
    q = np.asarray(estimates, dtype=float)
    u = np.asarray(variances, dtype=float)
    m = len(q)
    if m < 2 or len(u) != m:
        raise DataError("pooling needs m >= 2 estimates with variances")
    qbar = float(q.mean())
    wbar = float(u.mean())
    b = float(q.var(ddof=1))
    total = wbar + (1.0 + 1.0 / m) * b
    if b > 0:
        df = (m - 1) * (1.0 + wbar / ((1.0 + 1.0 / m) * b)) ** 2
        tq = stats.t.ppf(0.5 + ci_level / 2, df)
    else:
        df = np.inf
        tq = stats.norm.ppf(0.5 + ci_level / 2)
    half = tq * np.sqrt(total)
    return PooledEstimate(qbar, wbar, b, total, float(df), m,
                          (qbar - half, qbar + half))


# -- draw models --------------------------------------------------------------


def pmm_draw(target_pred, donor_pred, donor_values, k, rng):
    """Predictive mean matching: for each target, pick uniformly among the k
    donors with nearest predicted means and copy that donor's observed value."""
    donor_pred = np.asarray(donor_pred, dtype=float)
    donor_values = np.asarray(donor_values)
    target_pred = np.asarray(target_pred, dtype=float)
    if len(donor_pred) == 0:
        raise DataError("PMM donor pool is empty")
    if k < 1:
        raise DataError("PMM donor count must be >= 1")
    if len(donor_pred) < k:
        warnings.warn(f"PMM donor pool ({len(donor_pred)}) smaller than "
                      f"k={k}; using the full pool")
        k = len(donor_pred)
    dist = np.abs(donor_pred[None, :] - target_pred[:, None])
    nearest = np.argpartition(dist, k - 1, axis=1)[:, :k]
    # re-sort the k candidates so selection is order-stable
    rows = np.arange(len(target_pred))[:, None]
    order = np.argsort(dist[rows, nearest], axis=1, kind="stable")
    nearest = nearest[rows, order]
    pick = rng.integers(0, k, size=len(target_pred))
    return donor_values[nearest[np.arange(len(target_pred)), pick]]


def _category_codes(series, levels):
    codes = pd.Categorical(series.astype(str), categories=[str(l) for l in levels]).codes
    if (codes < 0).any():
        raise DataError("response contains a level outside the declared set")
    return codes.astype(float)


def _draw_values(varspec, method, frame, fit_rows, target_rows, predictors,
                 spec, rng):
    """Fit a draw model on fit_rows and return imputed values for target_rows.

    Numeric methods also return the respondent residuals (for offset SDs);
    categorical and tree methods return residuals=None.
    """
    resp_col = frame["__response__"]
    sub_fit = frame.loc[fit_rows]
    sub_tgt = frame.loc[target_rows]
    # predictors constant on the fit sample carry no information and would
    # make the design singular
    predictors = [(n, k, l) for n, k, l in predictors
                  if sub_fit[n].nunique() > 1]

    if method == "tree":
        tvars = [(n, k) for n, k, _ in predictors]
        boot = rng.integers(0, len(sub_fit), size=len(sub_fit))
        tr = fit_tree(sub_fit.iloc[boot].reset_index(drop=True), tvars,
                      resp_col.loc[fit_rows].to_numpy(float)[boot],
                      spec.tree, response_type="numeric")
        leaves = tr.apply(sub_tgt)
        y_boot = resp_col.loc[fit_rows].to_numpy(float)[boot]
        out = np.array([y_boot[leaf.members[rng.integers(0, len(leaf.members))]]
                        for leaf in leaves])
        return out, None

    builder = DesignBuilder(predictors)
    Xf = builder.matrix(sub_fit)
    Xt = builder.matrix(sub_tgt)

    if method in ("pmm", "gaussian"):
        y = resp_col.loc[fit_rows].to_numpy(float)
        fit = fit_glm(Xf, y, "gaussian")
        n, p = Xf.n, Xf.p
        dof = max(n - p, 1)
        resid = y - Xf.X @ fit.coef
        sigma2_hat = float(resid @ resid) / dof
        sigma2_star = dof * sigma2_hat / rng.chisquare(dof)
        scale = sigma2_star / max(float(resid @ resid) / n, 1e-300)
        cov = _psd(fit.cov * scale)
        beta_star = rng.multivariate_normal(fit.coef, cov, method="cholesky")
        if method == "gaussian":
            out = Xt.X @ beta_star + rng.standard_normal(Xt.n) * np.sqrt(sigma2_star)
            return out, resid
        pred_t = Xt.X @ beta_star
        pred_d = Xf.X @ fit.coef
        out = pmm_draw(pred_t, pred_d, y, spec.pmm_donors, rng)
        return out, resid

    if method == "logit":
        y = resp_col.loc[fit_rows].to_numpy(float)
        fit = fit_glm(Xf, y, "binomial")
        beta_star = rng.multivariate_normal(fit.coef, _psd(fit.cov),
                                            method="cholesky")
        fit.coef = beta_star
        p1 = predict_glm(fit, Xt)
        return (rng.uniform(size=Xt.n) < p1).astype(float), None

    # multinomial / ordinal draws by category probabilities
    levels = varspec.levels
    y = _category_codes(resp_col.loc[fit_rows], levels)
    observed = np.unique(y.astype(int))
    remap = {int(c): i for i, c in enumerate(observed)}
    y_fit = np.array([remap[int(v)] for v in y], dtype=float)
    fit = fit_glm(Xf, y_fit, "multinomial" if method == "multinomial" else "ordinal")
    fit.coef = rng.multivariate_normal(fit.coef, _psd(fit.cov), method="cholesky")
    if fit.family == "ordinal":
        p = len(fit.columns)
        cuts = fit.coef[p:]
        fit.coef[p:] = np.maximum.accumulate(cuts)  # keep cutpoints ordered
    probs = predict_glm(fit, Xt)
    probs = np.maximum(probs, 0.0)
    probs = probs / probs.sum(axis=1, keepdims=True)
    cum = np.cumsum(probs, axis=1)
    u = rng.uniform(size=Xt.n)
    drawn = (u[:, None] > cum).sum(axis=1)
    codes = observed[drawn]
    return np.asarray([str(levels[c]) for c in codes], dtype=object), None


def _psd(cov):
    # guard tiny asymmetries before a Cholesky-based normal draw
    c = 0.5 * (cov + cov.T)
    return c + 1e-12 * np.eye(len(c)) * max(1.0, np.trace(c) / len(c))


# -- predictor assembly --------------------------------------------------------


def _invariant_predictors(data, spec, exclude=()):
    preds = []
    for v in data.variables(roles=("invariant",)):
        if v.name not in exclude:
            preds.append((v.name, v.kind, v.levels))
    if spec.include_base_weight:
        wname = next(v.name for v in data.schema if v.role == "weight")
        preds.append((wname, "numeric", ()))
    return preds


def _wave_predictors(data, waves, exclude=()):
    preds = []
    for t in waves:
        for v in data.variables(roles=("covariate", "outcome")):
            col = v.column(t)
            if col not in exclude:
                preds.append((col, v.kind, v.levels))
    return preds


def _frame_for(df, predictors, response_col):
    cols = {n: df[n] for n, _, _ in predictors}
    cols["__response__"] = df[response_col]
    return pd.DataFrame(cols)


# -- item nonresponse ----------------------------------------------------------


def impute_item_nonresponse(data, spec=None, iterations=15, seed=0, rng=None):
    """One completed copy with item-nonresponse cells filled by within-wave
    chained equations (observed-wave cells and time-invariant gaps only).

    Visit order is ascending missingness rate, ties by declaration order.
    Call m times with distinct seeds for multiple copies.
    """
    spec = spec or ImputerSpec()
    rng = rng or np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    df = data.df.copy()

    # collect imputable cells: (column, varspec, wave, eligible-row mask)
    tasks = []
    for v in data.variables(roles=("invariant",)):
        mask = df[v.name].isna().to_numpy()
        if mask.all():
            raise DataError(f"variable {v.name!r} missing for all units")
        if mask.any():
            tasks.append((v.name, v, None, np.ones(data.n, dtype=bool)))
    for t in range(data.n_waves + 1):
        resp = data.response[:, t] == 1
        for v in data.variables(roles=("covariate", "outcome")):
            col = v.column(t)
            # cells missing at nonresponding waves are wave nonresponse,
            # handled by sequential_mi, not here
            miss = df[col].isna().to_numpy() & resp
            if miss.any():
                if not (df.loc[resp, col].notna()).any():
                    raise DataError(f"column {col!r} missing for all respondents")
                tasks.append((col, v, t, resp))
    if not tasks:
        return data.replace(df=df)

    tasks.sort(key=lambda task: float(df[task[0]].isna().to_numpy()[task[3]].mean()))

    # initialize gaps by resampling observed values
    holes = {}
    for col, v, t, elig in tasks:
        miss = df[col].isna().to_numpy() & elig
        holes[col] = miss
        obs = df.loc[elig & ~df[col].isna().to_numpy(), col].to_numpy()
        fill = obs[rng.integers(0, len(obs), size=int(miss.sum()))]
        df.loc[miss, col] = fill

    for _ in range(iterations):
        for col, v, t, elig in tasks:
            miss = holes[col]
            if t is None:
                preds = _invariant_predictors(data, spec, exclude=(v.name,))
                preds += _wave_predictors(data, [0])
            else:
                preds = _invariant_predictors(data, spec)
                preds += _wave_predictors(data, [t], exclude=(col,))
            frame = _frame_for(df, preds, col)
            fit_rows = np.flatnonzero(elig & ~miss)
            tgt_rows = np.flatnonzero(miss)
            method = spec.method_for(v)
            vals, _ = _draw_values(v, method, frame, fit_rows, tgt_rows,
                                   preds, spec, rng)
            df.loc[miss, col] = vals
    return data.replace(df=df)


# -- wave nonresponse (sequential monotone MI) ----------------------------------


def _default_offset_group(data, spec):
    if spec.offset_group is not None:
        v = data.var(spec.offset_group)
        if v.kind != "nominal" or v.time_varying:
            raise ConfigError("offset_group must be a time-invariant nominal variable")
        return v
    for v in data.variables(roles=("invariant",)):
        if v.kind == "nominal":
            return v
    return None


def _sigma_by_group(resid, groups, levels):
    """Residual SD per group; small groups fall back to the pooled SD."""
    pooled = float(np.std(resid, ddof=1)) if len(resid) > 1 else 0.0
    out = {}
    for lev in levels:
        mask = groups == str(lev)
        if mask.sum() < MIN_GROUP_FOR_SIGMA:
            warnings.warn(f"offset group {lev!r} has {int(mask.sum())} "
                          "respondents; using the pooled residual SD")
            out[str(lev)] = pooled
        else:
            out[str(lev)] = float(np.std(resid[mask], ddof=1))
    return out


def sequential_mi(data, spec=None, m=5, offsets=None, seed=0, iterations=15):
    """m completed copies by sequential wave-by-wave imputation (monotone).

    Item gaps at observed waves are chained-imputed first within each copy.
    `offsets` gives k_t per follow-up wave (scalar broadcasts; None or zeros
    is MAR): at a unit's dropout wave the drawn outcome is shifted by
    k_t * sigma_g, with sigma_g the respondent residual SD of the outcome
    draw model within the unit's offset group, and later waves condition on
    the shifted value.
    """
    spec = spec or ImputerSpec()
    if not data.is_monotone():
        raise DataError("sequential MI needs a monotone pattern; "
                        "run monotonize first")
    if m < 1:
        raise DataError("m must be >= 1")
    T = data.n_waves
    if offsets is None:
        k = np.zeros(T)
    elif np.isscalar(offsets):
        k = np.full(T, float(offsets))
    else:
        k = np.asarray(offsets, dtype=float)
        if k.shape != (T,):
            raise ConfigError(f"offset schedule must have {T} entries")
    any_offset = bool(np.any(k != 0.0))
    group_var = _default_offset_group(data, spec) if any_offset else None
    if any_offset and group_var is None:
        raise ConfigError("offsets need a nominal invariant grouping variable")

    outcome = data.outcome
    dropout = data.dropout_wave()
    streams = np.random.SeedSequence(seed).spawn(m)
    copies, sigma_tables = [], []
    for j in range(m):
        rng = np.random.Generator(np.random.Philox(streams[j]))
        completed = impute_item_nonresponse(data, spec, iterations, rng=rng)
        df = completed.df.copy()
        if df[[v.column(0) for v in data.variables(roles=("covariate", "outcome"))]].isna().any().any():
            raise DataError("baseline wave is incomplete after item imputation")
        sigma_waves = []
        for t in range(1, T + 1):
            resp = data.response[:, t] == 1
            fit_rows = np.flatnonzero(resp)
            miss_rows = np.flatnonzero(~resp)
            sigma_g = None
            done_cols = []
            # covariates first, outcome last, so the outcome model can
            # condition on current-wave covariates
            wave_vars = (data.variables(roles=("covariate",))
                         + data.variables(roles=("outcome",)))
            for v in wave_vars:
                col = v.column(t)
                preds = _invariant_predictors(data, spec)
                preds += _wave_predictors(data, range(t))
                preds += [(c, kk, ll) for c, kk, ll in done_cols]
                frame = _frame_for(df, preds, col)
                method = spec.method_for(v)
                if len(miss_rows):
                    vals, resid = _draw_values(v, method, frame, fit_rows,
                                               miss_rows, preds, spec, rng)
                    df.loc[df.index[miss_rows], col] = vals
                else:
                    resid = None
                if v.role == "outcome" and any_offset and k[t - 1] != 0.0:
                    if resid is None and len(miss_rows):
                        raise ConfigError(
                            "offsets need a numeric outcome imputed by a "
                            "regression-based method (pmm or gaussian)")
                    if len(miss_rows):
                        groups = df[group_var.name].astype(str).to_numpy()
                        sigma_g = _sigma_by_group(resid, groups[fit_rows],
                                                  group_var.levels)
                        at_dropout = dropout[miss_rows] == t
                        rows = miss_rows[at_dropout]
                        shift = k[t - 1] * np.array(
                            [sigma_g[groups[i]] for i in rows])
                        df.loc[df.index[rows], col] = (
                            df.loc[df.index[rows], col].to_numpy(float) + shift)
                done_cols.append((col, v.kind, v.levels))
            sigma_waves.append(sigma_g)
        copies.append(PanelDataset(df=df, schema=data.schema, n_waves=T,
                                   response=np.ones_like(data.response)))
        sigma_tables.append(sigma_waves)
    return ImputationSet(datasets=copies, m=m, iterations=iterations,
                         offsets=k, sigma_tables=sigma_tables, seed=seed)


def apply_offset(draw, k, sigma_g):
    """Shift an imputed dropout-wave outcome by k * sigma_g."""
    return np.asarray(draw, dtype=float) + k * sigma_g


# -- monotonize-by-imputation ---------------------------------------------------


def fill_intermittent(data, spec=None, seed=None):
    """Fill intermittent gap waves (missing, but observed later) with a
    single sequential draw, yielding a monotone-complete-prefix pattern."""
    spec = spec or ImputerSpec()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed or 0)))
    r = data.response
    df = data.df.copy()
    new_r = r.copy()
    report = []
    wave_vars = (data.variables(roles=("covariate",))
                 + data.variables(roles=("outcome",)))
    for t in range(1, data.n_waves + 1):
        gap = (r[:, t] == 0) & (r[:, t + 1:].max(axis=1, initial=0) == 1)
        if not gap.any():
            continue
        fit_rows = np.flatnonzero(new_r[:, t] == 1)
        tgt_rows = np.flatnonzero(gap)
        done_cols = []
        for v in wave_vars:
            col = v.column(t)
            preds = _invariant_predictors(data, spec)
            preds += _wave_predictors(data, range(t))
            preds += done_cols
            frame = _frame_for(df, preds, col)
            # earlier gap waves were filled in previous iterations
            vals, _ = _draw_values(v, spec.method_for(v), frame, fit_rows,
                                   tgt_rows, preds, spec, rng)
            need = df[col].isna().to_numpy()[tgt_rows]
            rows = tgt_rows[need]
            picked = np.asarray(vals)[need]
            if df[col].dtype.kind == "f":
                picked = picked.astype(float)
            df.loc[df.index[rows], col] = picked
            done_cols.append((col, v.kind, v.levels))
        new_r[tgt_rows, t] = 1
        report.extend((data.unit_ids[i], t) for i in tgt_rows)
    return data.replace(df=df, response=new_r), report
