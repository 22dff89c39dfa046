"""Side-by-side estimate table across the adjustment method menu.

Method tags:

  CCA              completers only, unweighted
  ACA              all responding unit-waves, unweighted
  CCA-base-w       completers, base weights
  ACA-base-w       responding unit-waves, base weights
  CCA-attr-w       completers, base weight times inverse completion propensity
  ACA-attr-w       per-wave baseline attrition weights
  ACA-seq-attr-w   per-wave sequential attrition weights
  MI-seq           sequential multiple imputation, combined estimates
  MI-offset        MI with dropout-wave sensitivity offsets, one set per k
  ML               random-intercept model on responding rows, unweighted
  w-ML             same model, sequential weights as pseudo-likelihood weights
  GEE              marginal model, AR(1) working correlation, unweighted
  w-GEE            same with sequential weights

Mean rows carry estimand "mean:w<t>" (optionally "|<group>=<level>"); model
rows carry "coef:<column>". Every row has est, se, lower, upper.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ConfigError, DataError
from .imputation import impute_item_nonresponse, pool, sequential_mi
from .models import AnalysisFormula, build_design, fit_gee, fit_mixed, long_frame
from .weighting import (baseline_weights, base_weight_set, cca_weights,
                        sequential_weights, weighted_mean)

VALID_TAGS = ("CCA", "ACA", "CCA-base-w", "ACA-base-w", "CCA-attr-w",
              "ACA-attr-w", "ACA-seq-attr-w", "MI-seq", "ML", "w-ML",
              "GEE", "w-GEE", "MI-offset")

MEAN_TAGS = ("CCA", "ACA", "CCA-base-w", "ACA-base-w", "CCA-attr-w",
             "ACA-attr-w", "ACA-seq-attr-w")


@dataclass
class EstimateTable:
    frame: pd.DataFrame             # method, estimand, est, se, lower, upper
    warnings: list = field(default_factory=list)

    def to_csv(self, path):
        self.frame.to_csv(path, index=False, float_format="%.10g")

    def rows(self, method=None, estimand=None):
        f = self.frame
        if method is not None:
            f = f[f["method"] == method]
        if estimand is not None:
            f = f[f["estimand"] == estimand]
        return f.to_dict("records")


def _z(ci_level):
    return float(stats.norm.ppf(0.5 + ci_level / 2))


def _mean_masks(data, tag):
    """(mask per wave, weight kind) defining which rows a mean tag uses."""
    complete = data.response.all(axis=1)
    out = []
    for t in range(data.n_waves + 1):
        resp = data.response[:, t] == 1
        out.append(complete.copy() if tag.startswith("CCA") else resp)
    return out


def _row(method, estimand, est, se, lower, upper):
    return {"method": method, "estimand": estimand, "est": float(est),
            "se": float(se), "lower": float(lower), "upper": float(upper)}


def _group_masks(data, subgroup):
    if subgroup is None:
        return [("", np.ones(len(data.df), dtype=bool))]
    try:
        spec = data.var(subgroup)
    except KeyError:
        raise ConfigError(f"unknown subgroup variable {subgroup!r}") from None
    if spec.kind not in ("nominal", "ordinal"):
        raise ConfigError(f"subgroup {subgroup!r} is not a categorical variable")
    vals = data.df[subgroup].astype(str).to_numpy()
    return [("", np.ones(len(vals), dtype=bool))] + \
        [(f"|{subgroup}={lev}", vals == str(lev)) for lev in spec.levels]


def _mean_rows_for(data, tag, wave_weights, subgroup, ci_level):
    """Taylor-linearized weighted means per wave (and subgroup level)."""
    masks = _mean_masks(data, tag)
    clusters = data.cluster_ids
    yname = data.outcome.name
    rows = []
    for suffix, gmask in _group_masks(data, subgroup):
        for t in range(data.n_waves + 1):
            mask = masks[t] & gmask
            if mask.sum() < 2:
                continue
            y = data.values(yname, t).to_numpy(dtype=float)[mask]
            w = wave_weights[t][mask]
            est, se, ci = weighted_mean(y, w, clusters[mask], ci_level)
            rows.append(_row(tag, f"mean:w{t}{suffix}", est, se, *ci))
    return rows


def _weights_by_wave(data, tag, built):
    """Full-length per-wave weight arrays (nan off-support) for a mean tag."""
    n, T = len(data.df), data.n_waves
    bw = data.base_weights
    if tag in ("CCA", "ACA"):
        return [np.ones(n) for _ in range(T + 1)]
    if tag in ("CCA-base-w", "ACA-base-w"):
        return [bw.copy() for _ in range(T + 1)]

    def expand(ws):
        full = np.full(n, np.nan)
        full[ws.index] = ws.weights
        return full

    if tag == "CCA-attr-w":
        return [expand(built["cca"])] * (T + 1)
    key = "baseline" if tag == "ACA-attr-w" else "sequential"
    per_wave = built[key]
    out = [bw.copy()]
    for t in range(1, T + 1):
        out.append(expand(per_wave[t]))
    return out


def _model_weights(data, design, built, power):
    """Sequential weight for each long-format row, normalized to mean 1."""
    lookup = {}
    for i, uid in enumerate(data.unit_ids):
        lookup[(uid, 0)] = data.base_weights[i]
    for t, ws in built["sequential"].items():
        for uid, w in zip(ws.unit_ids, ws.weights):
            lookup[(uid, t)] = w
    w = np.array([lookup.get((u, t), np.nan)
                  for u, t in zip(design.unit_ids, design.wave_ids)])
    if np.isnan(w).any():
        raise DataError("missing sequential weight for an analysis row")
    w = w ** power
    return w / w.mean()


def _coef_rows(tag, fit, ci_level):
    z = _z(ci_level)
    rows = []
    for name, b, s in zip(fit.columns, fit.coef, fit.se):
        rows.append(_row(tag, f"coef:{name}", b, s, b - z * s, b + z * s))
    return rows


def estimate_table(data, methods, formula=None, weight_model=None,
                   imputation=None, offset_imputations=None, m=5,
                   offsets=(-0.8, -1.2, -1.6), seed=0, subgroup=None,
                   weight_power=1.0, ci_level=0.95, imputer_spec=None):
    """Build the estimate table for the requested method tags.

    Weight sets and imputation sets are built on demand; prebuilt ones can
    be passed (`imputation` as an ImputationSet for MI-seq,
    `offset_imputations` as {k: ImputationSet} for MI-offset).
    """
    methods = list(methods)
    unknown = [mth for mth in methods if mth not in VALID_TAGS]
    if unknown:
        raise ConfigError(
            f"unknown method tag(s) {unknown}; valid tags: {list(VALID_TAGS)}")
    if formula is None and any(mth in ("ML", "w-ML", "GEE", "w-GEE")
                               for mth in methods):
        raise ConfigError("model methods need an analysis formula")

    built = {}
    def wdata():
        # propensity models need complete covariates at responding waves;
        # fill item gaps once (seeded) before any weight fitting
        if "wdata" not in built:
            covs = [v.column(t) for v in data.variables(roles=("covariate",))
                    for t in range(data.n_waves + 1)]
            if covs and data.df[covs].isna().to_numpy().any():
                built["wdata"] = impute_item_nonresponse(
                    data, imputer_spec, seed=seed)
            else:
                built["wdata"] = data
        return built["wdata"]

    def ensure(kind):
        if kind in built:
            return
        if kind == "cca":
            built["cca"] = cca_weights(wdata(), weight_model)
        elif kind == "baseline":
            built["baseline"] = {t: baseline_weights(wdata(), t, weight_model)
                                 for t in range(1, data.n_waves + 1)}
        elif kind == "sequential":
            built["sequential"] = {ws.wave: ws for ws in
                                   sequential_weights(wdata(), weight_model)}

    rows = []
    warn = []
    z = _z(ci_level)

    for tag in methods:
        if tag in MEAN_TAGS:
            if tag == "CCA-attr-w":
                ensure("cca")
            elif tag == "ACA-attr-w":
                ensure("baseline")
            elif tag == "ACA-seq-attr-w":
                ensure("sequential")
            ww = _weights_by_wave(data, tag, built)
            rows += _mean_rows_for(data, tag, ww, subgroup, ci_level)

        elif tag in ("ML", "GEE", "w-ML", "w-GEE"):
            frame = long_frame(data)
            design = build_design(frame, formula, data.schema)
            warn += [f"dropped column {c}" for c in design.dropped_columns]
            cw = None
            if tag.startswith("w-"):
                ensure("sequential")
                cw = _model_weights(data, design, built, weight_power)
            if tag.endswith("ML"):
                fit = fit_mixed(design.X, design.y, design.unit_ids,
                                case_weights=cw)
            else:
                fit = fit_gee(design.X, design.y, design.unit_ids,
                              design.wave_ids, working="ar1", case_weights=cw)
            rows += _coef_rows(tag, fit, ci_level)

        elif tag == "MI-seq":
            imp = imputation
            if imp is None:
                imp = sequential_mi(data, imputer_spec, m=m, seed=seed)
            rows += _mi_rows("MI-seq", imp, data, formula, subgroup, ci_level)

        elif tag == "MI-offset":
            sets = offset_imputations
            if sets is None:
                sets = {k: sequential_mi(data, imputer_spec, m=m, offsets=k,
                                         seed=seed) for k in offsets}
            for k in sorted(sets, reverse=True):
                rows += _mi_rows(f"MI-offset(k={k:g})", sets[k], data,
                                 None, subgroup, ci_level)

    frame = pd.DataFrame(rows, columns=["method", "estimand", "est", "se",
                                        "lower", "upper"])
    frame = frame.sort_values(["method", "estimand"],
                              kind="stable").reset_index(drop=True)
    return EstimateTable(frame=frame, warnings=warn)


def _mi_rows(tag, imp, data, formula, subgroup, ci_level):
    """Pool per-copy means (and model coefficients when a formula is given)."""
    yname = data.outcome.name
    clusters = data.cluster_ids
    bw = data.base_weights
    rows = []

    per_copy_means = {}
    for d in imp.datasets:
        for suffix, gmask in _group_masks(data, subgroup):
            for t in range(data.n_waves + 1):
                y = d.values(yname, t).to_numpy(dtype=float)[gmask]
                est, se, _ = weighted_mean(y, bw[gmask], clusters[gmask],
                                           ci_level)
                per_copy_means.setdefault(f"mean:w{t}{suffix}", []).append(
                    (est, se**2))
    for estimand, pairs in per_copy_means.items():
        p = pool([e for e, _ in pairs], [v for _, v in pairs], ci_level)
        rows.append(_row(tag, estimand, p.estimate, p.se, *p.ci))

    if formula is not None:
        per_coef = {}
        for d in imp.datasets:
            design = build_design(long_frame(d), formula, data.schema)
            fit = fit_mixed(design.X, design.y, design.unit_ids)
            for name, b, v in zip(fit.columns, fit.coef, np.diag(fit.cov)):
                per_coef.setdefault(name, []).append((b, v))
        for name, pairs in per_coef.items():
            p = pool([e for e, _ in pairs], [v for _, v in pairs], ci_level)
            rows.append(_row(tag, f"coef:{name}", p.estimate, p.se, *p.ci))
    return rows
