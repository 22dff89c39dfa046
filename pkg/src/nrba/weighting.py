"""Attrition weight construction and weighted estimation.

Baseline weights invert a response-propensity model fit on baseline
information only; sequential weights multiply inverse conditional
propensities wave by wave, each fit on the units still responding and
conditioning on everything observed through the previous wave. Weights are
scaled to sum to the available sample size at their wave. Variance comes
from Taylor linearization over clusters or a cluster bootstrap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DataError, NumericalError
from .glm import DesignBuilder, auc, fit_glm, predict_glm, stepwise_select
from .tree import TreeConfig, fit_propensity_tree

DEFAULT_BOUNDS = (0.02, 0.98)


@dataclass
class PropensityModelSpec:
    kind: str = "glm"               # "glm" | "tree"
    stepwise: bool = False
    criterion: str = "aic"
    include_base_weight: bool = True
    tree: TreeConfig = field(default_factory=TreeConfig)

    def validate(self):
        if self.kind not in ("glm", "tree"):
            raise DataError(f"unknown propensity model kind {self.kind!r}")
        return self


@dataclass
class WeightSet:
    """Per-wave weights on the responding units, with provenance records."""

    wave: int
    index: np.ndarray               # row positions of carriers in the source panel
    unit_ids: np.ndarray
    weights: np.ndarray
    provenance: str                 # base | CCA-attr | ACA-attr | ACA-seq-attr
    target_sum: float
    bounds: tuple = DEFAULT_BOUNDS
    trim_record: dict | None = None
    fit_info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if (self.weights <= 0).any():
            raise DataError("weights must be strictly positive")

    def frame(self):
        return pd.DataFrame({"unit_id": self.unit_ids, "wave": self.wave,
                             "weight": self.weights,
                             "provenance": self.provenance})


def _scaled(w, target):
    return w * (target / w.sum())


def _predictor_frame(data, through_wave, include_base_weight=True):
    """All variables observed through a wave, as one typed frame.

    Returns (frame, variables) where variables are (name, kind, levels)
    triples in a fixed order for the design builder.
    """
    frame = {}
    variables = []
    for v in data.variables(roles=("invariant",)):
        frame[v.name] = data.df[v.name]
        variables.append((v.name, v.kind, v.levels))
    if include_base_weight:
        wname = next(v.name for v in data.schema if v.role == "weight")
        frame[wname] = data.df[wname]
        variables.append((wname, "numeric", ()))
    for t in range(through_wave + 1):
        for v in data.variables(roles=("covariate", "outcome")):
            col = v.column(t)
            frame[col] = data.df[col]
            variables.append((col, v.kind, v.levels))
    return pd.DataFrame(frame), variables


def _fit_propensity(frame, variables, response, spec):
    """Fit the configured propensity model; returns (p_hat, fit_info)."""
    spec.validate()
    for name, _, _ in variables:
        if frame[name].isna().any():
            raise DataError(
                f"propensity predictor {name!r} has missing values; "
                "impute item nonresponse first")
    # constant predictors (e.g. uniform base weights) carry no information
    variables = [(n, k, l) for n, k, l in variables if frame[n].nunique() > 1]
    y = np.asarray(response, dtype=float)
    if len(np.unique(y)) < 2:
        # degenerate wave (everyone responds, or nobody does): constant
        # propensity, no model to fit
        return np.full(len(y), y.mean()), {"model": "constant"}
    if spec.kind == "tree":
        tvars = [(n, k) for n, k, _ in variables]
        fit = fit_propensity_tree(frame, tvars, y, spec.tree)
        p = fit.predict(frame)
        info = {"model": "tree", "n_leaves": len(fit.leaves())}
    else:
        builder = DesignBuilder(variables)
        dm = builder.matrix(frame)
        if spec.stepwise:
            scope = [n for n, _, _ in variables]
            fit, selected = stepwise_select(dm, y, "binomial", scope,
                                            criterion=spec.criterion)
            info = {"model": "glm-stepwise", "selected": selected}
        else:
            fit = fit_glm(dm, y, "binomial")
            info = {"model": "glm"}
        p = predict_glm(fit, dm)
    if len(np.unique(y)) == 2:
        info["auc"] = auc(p, y.astype(int))
    return p, info


def _clip(p, bounds):
    return np.clip(p, bounds[0], bounds[1])


def baseline_weights(data, wave, model=None, bounds=DEFAULT_BOUNDS,
                     provenance="ACA-attr"):
    """Inverse-propensity weights for responding at `wave`, conditioning on
    baseline information only (Z, X0, Y0, base weight)."""
    if wave < 1 or wave > data.n_waves:
        raise DataError(f"wave must lie in 1..{data.n_waves}")
    model = model or PropensityModelSpec()
    resp = data.response[:, wave] == 1
    if not resp.any():
        raise DataError(f"no respondents at wave {wave}")
    frame, variables = _predictor_frame(data, 0, model.include_base_weight)
    p, info = _fit_propensity(frame, variables, resp.astype(float), model)
    p = _clip(p, bounds)
    idx = np.flatnonzero(resp)
    w = data.base_weights[idx] / p[idx]
    return WeightSet(wave=wave, index=idx, unit_ids=data.unit_ids[idx],
                     weights=_scaled(w, len(idx)), provenance=provenance,
                     target_sum=float(len(idx)), bounds=bounds, fit_info=info)


def cca_weights(data, model=None, bounds=DEFAULT_BOUNDS):
    """Complete-case attrition weights: one model for responding at every
    wave, conditioned on baseline information."""
    model = model or PropensityModelSpec()
    resp = data.response.all(axis=1)
    if not resp.any():
        raise DataError("no complete cases")
    frame, variables = _predictor_frame(data, 0, model.include_base_weight)
    p, info = _fit_propensity(frame, variables, resp.astype(float), model)
    p = _clip(p, bounds)
    idx = np.flatnonzero(resp)
    w = data.base_weights[idx] / p[idx]
    return WeightSet(wave=data.n_waves, index=idx, unit_ids=data.unit_ids[idx],
                     weights=_scaled(w, len(idx)), provenance="CCA-attr",
                     target_sum=float(len(idx)), bounds=bounds, fit_info=info)


def sequential_weights(data, model=None, bounds=DEFAULT_BOUNDS):
    """Sequential attrition weights for waves 1..T on a monotone panel.

    The wave-t weight is the wave-(t-1) weight times the inverse conditional
    response propensity given everything observed through wave t-1; each
    wave's set is then scaled to its available sample size.
    """
    if not data.is_monotone():
        raise DataError("sequential weights need a monotone pattern; "
                        "run monotonize first")
    model = model or PropensityModelSpec()
    prod = data.base_weights.copy()
    out = []
    for t in range(1, data.n_waves + 1):
        at_risk = data.response[:, t - 1] == 1
        resp_t = data.response[:, t] == 1
        if not resp_t.any():
            raise DataError(f"no respondents at wave {t}")
        frame, variables = _predictor_frame(data, t - 1, model.include_base_weight)
        sub = frame.loc[at_risk].reset_index(drop=True)
        p, info = _fit_propensity(sub, variables,
                                  resp_t[at_risk].astype(float), model)
        p = _clip(p, bounds)
        prod[at_risk] = prod[at_risk] / p
        idx = np.flatnonzero(resp_t)
        out.append(WeightSet(
            wave=t, index=idx, unit_ids=data.unit_ids[idx],
            weights=_scaled(prod[idx], len(idx)), provenance="ACA-seq-attr",
            target_sum=float(len(idx)), bounds=bounds, fit_info=info))
    return out


def base_weight_set(data, wave, provenance="base"):
    """The scaled base weights of the units responding at a wave."""
    idx = np.flatnonzero(data.response[:, wave] == 1)
    w = data.base_weights[idx]
    return WeightSet(wave=wave, index=idx, unit_ids=data.unit_ids[idx],
                     weights=_scaled(w, len(idx)), provenance=provenance,
                     target_sum=float(len(idx)), bounds=(0.0, 1.0))


def trim_weights(ws, quantile):
    """Cap weights at their `quantile` value (type-7 interpolation), then
    rescale back to the original target sum."""
    if not 0.0 < quantile <= 1.0:
        raise DataError("trim quantile must lie in (0, 1]")
    cap = float(np.quantile(ws.weights, quantile))
    n_trimmed = int((ws.weights > cap).sum())
    w = np.minimum(ws.weights, cap)
    return WeightSet(wave=ws.wave, index=ws.index, unit_ids=ws.unit_ids,
                     weights=_scaled(w, ws.target_sum),
                     provenance=ws.provenance, target_sum=ws.target_sum,
                     bounds=ws.bounds,
                     trim_record={"quantile": quantile, "cap": cap,
                                  "n_trimmed": n_trimmed},
                     fit_info=ws.fit_info)


@dataclass
class WeightDiagnostics:
    provenance: str
    wave: int
    n: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    sd: float
    loss: float                     # cv^2 = var / mean^2
    design_effect: float            # 1 + cv^2
    quintile_summary: pd.DataFrame | None = None

    def row(self):
        return {"provenance": self.provenance, "wave": self.wave,
                "min": self.minimum, "q1": self.q1, "median": self.median,
                "q3": self.q3, "max": self.maximum, "sd": self.sd,
                "loss": self.loss, "design_effect": self.design_effect,
                "n": self.n}


def weight_diagnostics(ws, outcome=None):
    """Distribution summary, efficiency loss cv^2(w), and design effect;
    optionally outcome summaries by weight quintile."""
    w = ws.weights
    mean = w.mean()
    var = w.var(ddof=1) if len(w) > 1 else 0.0
    loss = var / mean**2
    q = np.quantile(w, [0.25, 0.5, 0.75])
    quint = None
    if outcome is not None:
        outcome = np.asarray(outcome, dtype=float)
        if len(outcome) != len(w):
            raise DataError("outcome length must match weight carriers")
        edges = np.quantile(w, [0.2, 0.4, 0.6, 0.8])
        grp = np.searchsorted(edges, w, side="right")
        rows = []
        for g in range(5):
            vals = outcome[grp == g]
            if len(vals) == 0:
                continue
            rows.append({"quintile": g + 1, "n": len(vals),
                         "mean": vals.mean(),
                         "q1": np.quantile(vals, 0.25),
                         "median": np.quantile(vals, 0.5),
                         "q3": np.quantile(vals, 0.75)})
        quint = pd.DataFrame(rows)
    return WeightDiagnostics(
        provenance=ws.provenance, wave=ws.wave, n=len(w),
        minimum=float(w.min()), q1=float(q[0]), median=float(q[1]),
        q3=float(q[2]), maximum=float(w.max()), sd=float(np.sqrt(var)),
        loss=float(loss), design_effect=float(1.0 + loss),
        quintile_summary=quint)


def weighted_mean(y, w, cluster_ids, ci_level=0.95):
    """Weighted mean with Taylor-linearized cluster variance.

    Returns (estimate, se, (lower, upper)).
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    cluster_ids = np.asarray(cluster_ids)
    if not (len(y) == len(w) == len(cluster_ids)):
        raise DataError("y, w, cluster_ids must have equal length")
    if w.sum() <= 0:
        raise DataError("weights must have positive sum")
    est = float(w @ y / w.sum())
    u = w * (y - est) / w.sum()
    totals = pd.Series(u).groupby(pd.Series(cluster_ids)).sum().to_numpy()
    c = len(totals)
    if c < 2:
        raise DataError("Taylor variance needs at least two clusters")
    var = c / (c - 1) * float(((totals - totals.mean()) ** 2).sum())
    se = float(np.sqrt(var))
    from scipy.stats import norm
    zq = norm.ppf(0.5 + ci_level / 2)
    return est, se, (est - zq * se, est + zq * se)


def bootstrap_se(estimator, cluster_ids, B=500, seed=0, max_failures=0.05):
    """Cluster-bootstrap standard error of a scalar estimator.

    `estimator(row_indices)` must recompute the full estimate (including any
    model refits) on the resampled rows. Replicates use independent RNG
    substreams keyed by replicate index, so results do not depend on
    execution order.
    """
    if B < 50:
        raise DataError("bootstrap needs B >= 50 replicates")
    cluster_ids = np.asarray(cluster_ids)
    clusters = pd.unique(cluster_ids)
    rows_by_cluster = {c: np.flatnonzero(cluster_ids == c) for c in clusters}
    streams = np.random.SeedSequence(seed).spawn(B)
    estimates, failures = [], []
    for b in range(B):
        rng = np.random.Generator(np.random.Philox(streams[b]))
        chosen = rng.choice(clusters, size=len(clusters), replace=True)
        idx = np.concatenate([rows_by_cluster[c] for c in chosen])
        try:
            estimates.append(float(estimator(idx)))
        except NumericalError as e:
            failures.append((b, str(e)))
    if len(failures) > max_failures * B:
        raise NumericalError(
            f"bootstrap estimator failed in {len(failures)}/{B} replicates; "
            f"first failure: {failures[0][1]}")
    return float(np.std(estimates, ddof=1))
