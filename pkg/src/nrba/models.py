"""Analysis models for repeated measures: a random-intercept linear mixed
model fit by (weighted pseudo-) maximum likelihood with a profiled variance
ratio, and a marginal model fit by (weighted) GEE with an AR(1) or
independence working correlation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ConfigError, ConvergenceError, DataError
from .glm import DesignMatrix

MIXED_TOL = 1e-10
GEE_TOL = 1e-8
MAX_ITER = 200


# -- formula and design -------------------------------------------------------


@dataclass(frozen=True)
class AnalysisFormula:
    """Fixed-effect structure for the long-format outcome regression.

    numeric_terms enter linearly; names listed in `standardize` are centered
    and scaled (mean 0, SD 1 over included rows) first, and names in
    `quadratic` additionally contribute a squared column (built after
    standardization). nominal_terms are dummy-coded against their first
    level. Wave dummies (reference wave 0) and the wave-by-`interaction`
    dummies reproduce a growth-curve mean structure.
    """

    outcome: str
    numeric_terms: tuple = ()
    standardize: tuple = ()
    quadratic: tuple = ()
    binary_terms: tuple = ()
    nominal_terms: tuple = ()
    wave_dummies: bool = True
    interaction: str | None = None        # nominal term interacted with wave

    def variables(self):
        return (tuple(self.numeric_terms) + tuple(self.binary_terms)
                + tuple(self.nominal_terms))


@dataclass
class LongDesign:
    X: DesignMatrix
    y: np.ndarray
    unit_ids: np.ndarray
    wave_ids: np.ndarray
    weights: np.ndarray | None = None
    dropped_columns: list = field(default_factory=list)
    n_rows_excluded: int = 0


def long_frame(data, waves=None):
    """Stack a wide panel into responding unit-wave rows."""
    waves = range(data.n_waves + 1) if waves is None else waves
    inv = data.variables(roles=("invariant", "cluster", "weight"))
    tv = data.variables(roles=("covariate", "outcome"))
    parts = []
    for t in waves:
        resp = data.response[:, t] == 1
        if not resp.any():
            continue
        part = {"unit_id": data.unit_ids[resp], "wave": t}
        for v in inv:
            part[v.name] = data.df.loc[resp, v.name].to_numpy()
        for v in tv:
            part[v.name] = data.df.loc[resp, v.column(t)].to_numpy()
        parts.append(pd.DataFrame(part))
    if not parts:
        raise DataError("no responding unit-waves")
    return pd.concat(parts, ignore_index=True)


def build_design(frame, formula, data_schema):
    """Design matrix for the analysis model from a long-format frame.

    Rows with any missing formula variable are excluded (available-case
    semantics); empty wave-by-group interaction cells drop their column with
    a warning.
    """
    kinds = {v.name: (v.kind, v.levels) for v in data_schema}
    needed = [formula.outcome, *formula.variables()]
    for name in needed:
        if name not in frame.columns:
            raise DataError(f"formula variable {name!r} missing from data")
    complete = frame[needed].notna().all(axis=1)
    n_excluded = int((~complete).sum())
    sub = frame.loc[complete].reset_index(drop=True)
    if len(sub) == 0:
        raise DataError("no complete rows for the analysis formula")

    cols = [np.ones(len(sub))]
    labels = ["(intercept)"]
    dropped = []

    for name in formula.numeric_terms:
        x = sub[name].to_numpy(dtype=float)
        if name in formula.standardize:
            sd = x.std(ddof=0)
            x = (x - x.mean()) / (sd if sd > 0 else 1.0)
        cols.append(x)
        labels.append(name)
        if name in formula.quadratic:
            cols.append(x**2)
            labels.append(f"{name}^2")
    for name in formula.binary_terms:
        cols.append(sub[name].to_numpy(dtype=float))
        labels.append(name)

    def dummies(name):
        kind, levels = kinds[name]
        if kind not in ("nominal", "ordinal"):
            raise ConfigError(f"{name!r} is not a categorical variable")
        vals = sub[name].astype(str).to_numpy()
        return [(f"{name}[{lev}]", (vals == str(lev)).astype(float))
                for lev in levels[1:]]

    for name in formula.nominal_terms:
        for lab, col in dummies(name):
            cols.append(col)
            labels.append(lab)

    waves = np.sort(sub["wave"].unique())
    wave_cols = []
    if formula.wave_dummies:
        for t in waves:
            if t == waves[0]:
                continue
            col = (sub["wave"].to_numpy() == t).astype(float)
            wave_cols.append((f"wave[{t}]", col))
            cols.append(col)
            labels.append(f"wave[{t}]")

    if formula.interaction is not None:
        if formula.interaction not in formula.nominal_terms:
            raise ConfigError("interaction variable must be in nominal_terms")
        for wlab, wcol in wave_cols:
            for glab, gcol in dummies(formula.interaction):
                col = wcol * gcol
                lab = f"{wlab}:{glab}"
                if col.sum() == 0:
                    dropped.append(lab)
                    warnings.warn(f"empty interaction cell {lab}; column dropped")
                    continue
                cols.append(col)
                labels.append(lab)

    mat = np.column_stack(cols)
    if np.linalg.matrix_rank(mat) < mat.shape[1]:
        raise DataError("analysis design matrix is rank deficient")
    X = DesignMatrix(mat, labels)
    y = sub[formula.outcome].to_numpy(dtype=float)
    return LongDesign(X=X, y=y, unit_ids=sub["unit_id"].to_numpy(),
                      wave_ids=sub["wave"].to_numpy(),
                      dropped_columns=dropped, n_rows_excluded=n_excluded)


# -- mixed model ----------------------------------------------------------------


@dataclass
class MixedFit:
    coef: np.ndarray
    cov: np.ndarray
    sigma0_sq: float                 # random-intercept variance
    sigma_sq: float                  # residual variance
    loglik: float
    n_iter: int
    converged: bool
    boundary: bool                   # sigma0^2 pinned at zero
    columns: list
    loglik_path: list = field(default_factory=list)

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov))


def _group_rows(unit_ids):
    order = np.argsort(unit_ids, kind="stable")
    ids = np.asarray(unit_ids)[order]
    cuts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1], True])
    return [order[cuts[i]:cuts[i + 1]] for i in range(len(cuts) - 1)]


def fit_mixed(X, y, unit_ids, case_weights=None, psi=None):
    """Gaussian random-intercept model by ML, profiled over the variance
    ratio psi = sigma0^2 / sigma^2.

    With observation weights the objective is the weighted pseudo-likelihood
    in which each observation's density contribution is raised to its weight
    (exact ML when all weights are 1). `psi` pins the variance ratio instead
    of profiling it; psi=0 reduces the fit to weighted least squares.
    """
    columns = X.columns if isinstance(X, DesignMatrix) else None
    X = X.X if isinstance(X, DesignMatrix) else np.asarray(X, float)
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if case_weights is None else np.asarray(case_weights, float)
    if (w <= 0).any():
        raise DataError("case weights must be positive")
    groups = _group_rows(unit_ids)
    if sum(1 for g in groups if len(g) >= 2) < 2:
        raise DataError("mixed model needs >= 2 units with >= 2 observations")
    n, p = X.shape
    S = w.sum()
    s_i = np.array([w[g].sum() for g in groups])

    def profile(psi):
        # GLS with unit precision A_i = D_i - psi/(1+psi s_i) d_i d_i'
        shrink = psi / (1.0 + psi * s_i)
        XtAX = np.zeros((p, p))
        XtAy = np.zeros(p)
        for g, sh in zip(groups, shrink):
            Xg, yg, wg = X[g], y[g], w[g]
            Xw = Xg * wg[:, None]
            xw_sum = Xw.sum(axis=0)
            yw_sum = float(wg @ yg)
            XtAX += Xg.T @ Xw - sh * np.outer(xw_sum, xw_sum)
            XtAy += Xw.T @ yg - sh * xw_sum * yw_sum
        beta = np.linalg.solve(XtAX, XtAy)
        Q = 0.0
        for g, sh in zip(groups, shrink):
            r = y[g] - X[g] @ beta
            wr = w[g] * r
            Q += float(r @ wr) - sh * float(wr.sum()) ** 2
        sigma2 = max(Q / S, 1e-300)
        ll = (-0.5 * S * (np.log(2 * np.pi * sigma2) + 1.0)
              - 0.5 * float(np.log1p(psi * s_i).sum()))
        return ll, beta, sigma2, XtAX

    if psi is not None:
        if psi < 0:
            raise ConfigError("variance ratio must be nonnegative")
        ll, beta, sigma2, XtAX = profile(float(psi))
        cov = np.linalg.inv(XtAX) * sigma2
        return MixedFit(coef=beta, cov=cov, sigma0_sq=float(psi) * sigma2,
                        sigma_sq=sigma2, loglik=ll, n_iter=0, converged=True,
                        boundary=psi == 0.0,
                        columns=list(columns) if columns is not None
                        else [f"x{j}" for j in range(p)], loglik_path=[ll])

    # coarse bracket on psi >= 0, then golden-section refinement; the
    # accepted path is non-decreasing by construction
    grid = np.r_[0.0, np.geomspace(1e-6, 1e6, 49)]
    lls = []
    path = []
    best_ll = -np.inf
    for psi in grid:
        ll = profile(psi)[0]
        lls.append(ll)
        if ll > best_ll:
            best_ll = ll
        path.append(best_ll)
    k = int(np.argmax(lls))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, len(grid) - 1)]
    if k == len(grid) - 1:
        hi = grid[-1] * 10

    phi = (np.sqrt(5.0) - 1) / 2
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = profile(c)[0], profile(d)[0]
    n_iter = 0
    converged = False
    for n_iter in range(1, MAX_ITER + 1):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = profile(c)[0]
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = profile(d)[0]
        new_best = max(fc, fd, best_ll)
        path.append(new_best)
        if abs(new_best - best_ll) < MIXED_TOL * max(1.0, abs(new_best)) \
                and (b - a) < 1e-9 * max(1.0, b):
            best_ll = new_best
            converged = True
            break
        best_ll = new_best
    if not converged:
        raise ConvergenceError("mixed-model profile search did not converge",
                               trace=path)

    psi_hat = 0.0 if lls[0] >= best_ll - 1e-12 and k == 0 else (a + b) / 2
    ll, beta, sigma2, XtAX = profile(psi_hat)
    if lls[0] >= ll:   # boundary solution
        psi_hat = 0.0
        ll, beta, sigma2, XtAX = profile(0.0)
    cov = np.linalg.inv(XtAX) * sigma2
    return MixedFit(coef=beta, cov=cov, sigma0_sq=psi_hat * sigma2,
                    sigma_sq=sigma2, loglik=ll, n_iter=n_iter,
                    converged=True, boundary=psi_hat == 0.0,
                    columns=list(columns) if columns is not None
                    else [f"x{j}" for j in range(p)],
                    loglik_path=path)


# -- GEE --------------------------------------------------------------------------


@dataclass
class GeeFit:
    coef: np.ndarray
    cov: np.ndarray                  # robust sandwich covariance
    rho: float
    working: str
    weighted: bool
    n_iter: int
    converged: bool
    columns: list

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov))


def fit_gee(X, y, unit_ids, wave_ids, working="ar1", case_weights=None):
    """Marginal linear model by (weighted) GEE.

    Alternates a weighted estimating-equation solve for the coefficients
    with a lag-1 moment update of the AR(1) parameter from standardized
    residuals of consecutive observed waves, until the coefficient step
    falls below 1e-8. The reported covariance is the robust sandwich.
    """
    if working not in ("independence", "ar1"):
        raise ConfigError(f"unknown working correlation {working!r}")
    dm_columns = X.columns if isinstance(X, DesignMatrix) else None
    X = X.X if isinstance(X, DesignMatrix) else np.asarray(X, float)
    y = np.asarray(y, dtype=float)
    waves = np.asarray(wave_ids, dtype=float)
    w = np.ones(len(y)) if case_weights is None else np.asarray(case_weights, float)
    if (w <= 0).any():
        raise DataError("case weights must be positive")
    groups = _group_rows(unit_ids)
    n, p = X.shape

    def solve_beta(rho):
        B = np.zeros((p, p))
        v = np.zeros(p)
        for g in groups:
            Xg, yg, wg, tg = X[g], y[g], w[g], waves[g]
            if working == "ar1" and len(g) > 1 and rho != 0.0:
                R = rho ** np.abs(tg[:, None] - tg[None, :])
                G = Xg.T @ np.linalg.solve(R, np.diag(wg))
            else:
                G = (Xg * wg[:, None]).T
            B += G @ Xg
            v += G @ yg
        return np.linalg.solve(B, v), B

    def update_rho(beta):
        r = y - X @ beta
        # normalized so that rescaling all weights (or duplicating every
        # observation at half weight) leaves rho unchanged
        sigma2 = float(w @ r**2) / w.sum()
        num = den = 0.0
        for g in groups:
            tg, rg, wg = waves[g], r[g], w[g]
            order = np.argsort(tg, kind="stable")
            tg, rg, wg = tg[order], rg[order], wg[order]
            lag1 = np.flatnonzero(np.diff(tg) == 1)
            if len(lag1) == 0:
                continue
            pw = np.sqrt(wg[lag1] * wg[lag1 + 1])
            num += float((pw * rg[lag1] * rg[lag1 + 1]).sum())
            den += float(pw.sum())
        if den == 0:
            return 0.0
        rho = num / (den * sigma2)
        if abs(rho) >= 1.0:
            warnings.warn(f"AR(1) moment estimate {rho:.3f} outside (-1, 1); "
                          "clipped to +/-0.99")
            rho = float(np.clip(rho, -0.99, 0.99))
        return rho

    rho = 0.0
    beta, B = solve_beta(rho)
    converged = False
    for it in range(1, MAX_ITER + 1):
        if working == "ar1":
            rho = update_rho(beta)
        new_beta, B = solve_beta(rho)
        step = np.max(np.abs(new_beta - beta)) / max(1.0, np.max(np.abs(new_beta)))
        beta = new_beta
        if step < GEE_TOL:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"GEE did not converge in {MAX_ITER} iterations")

    # robust sandwich covariance
    M = np.zeros((p, p))
    r = y - X @ beta
    for g in groups:
        Xg, rg, wg, tg = X[g], r[g], w[g], waves[g]
        if working == "ar1" and len(g) > 1 and rho != 0.0:
            R = rho ** np.abs(tg[:, None] - tg[None, :])
            gi = Xg.T @ np.linalg.solve(R, wg * rg)
        else:
            gi = Xg.T @ (wg * rg)
        M += np.outer(gi, gi)
    Binv = np.linalg.inv(B)
    cov = Binv @ M @ Binv.T
    return GeeFit(coef=beta, cov=cov, rho=float(rho), working=working,
                  weighted=case_weights is not None, n_iter=it,
                  converged=True,
                  columns=list(dm_columns) if dm_columns is not None
                  else [f"x{j}" for j in range(p)])
