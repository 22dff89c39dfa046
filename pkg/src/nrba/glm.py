"""Regression kernel: design-matrix construction with dummy coding,
(weighted) maximum-likelihood fits for binomial / multinomial / ordinal /
gaussian families by Fisher scoring, bidirectional stepwise selection, and
rank-based AUC.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, logsumexp
from scipy.stats import rankdata

from .errors import ConvergenceError, DataError, SeparationError, SingularMatrixError

MAX_ITER = 100
STEP_TOL = 1e-8
SEPARATION_ETA = 30.0

FAMILIES = ("binomial", "multinomial", "ordinal", "gaussian")

INTERCEPT = "(intercept)"


# -- design matrices --------------------------------------------------------


@dataclass
class DesignMatrix:
    """Dense model matrix with column labels and named term blocks.

    Blocks map a source variable to its contiguous column indices (a dummy
    block for a categorical, a single column otherwise); the intercept is its
    own block. Stepwise moves operate on whole blocks.
    """

    X: np.ndarray
    columns: list
    blocks: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if len(self.columns) != self.X.shape[1]:
            raise ValueError("column label count mismatch")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("duplicate design column labels")
        if np.isnan(self.X).any():
            raise DataError("design matrix contains missing entries")
        if not self.blocks:
            self.blocks = {c: [j] for j, c in enumerate(self.columns)}

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def subset(self, block_names):
        idx = [j for b in block_names for j in self.blocks[b]]
        blocks, pos = {}, 0
        for b in block_names:
            k = len(self.blocks[b])
            blocks[b] = list(range(pos, pos + k))
            pos += k
        return DesignMatrix(self.X[:, idx], [self.columns[j] for j in idx], blocks)


class DesignBuilder:
    """Builds design matrices from typed data frames with a frozen coding.

    The coding (column order, categorical levels, reference = first level) is
    fixed at construction so that matrices built for new data line up with a
    fit's coefficients; unseen categorical levels are an error.
    """

    def __init__(self, variables, intercept=True):
        # variables: list of (name, kind, levels) with kind in panel.KINDS
        self.variables = list(variables)
        self.intercept = intercept

    def matrix(self, frame):
        cols, labels, blocks = [], [], {}
        if self.intercept:
            cols.append(np.ones(len(frame)))
            labels.append(INTERCEPT)
            blocks[INTERCEPT] = [0]
        for name, kind, levels in self.variables:
            if name not in frame.columns:
                raise DataError(f"design variable {name!r} missing from data")
            s = frame[name]
            if s.isna().any():
                raise DataError(f"design variable {name!r} has missing values")
            start = len(labels)
            if kind in ("nominal", "ordinal"):
                levels = [str(l) for l in levels]
                vals = s.astype(str)
                unseen = sorted(set(vals) - set(levels))
                if unseen:
                    raise DataError(
                        f"variable {name!r}: unseen level {unseen[0]!r}")
                for lev in levels[1:]:  # first level is the reference
                    cols.append((vals == lev).to_numpy(dtype=float))
                    labels.append(f"{name}[{lev}]")
            else:
                cols.append(s.to_numpy(dtype=float))
                labels.append(name)
            blocks[name] = list(range(start, len(labels)))
        return DesignMatrix(np.column_stack(cols), labels, blocks)


# -- fits -------------------------------------------------------------------


@dataclass
class GlmFit:
    family: str
    coef: np.ndarray            # stacked parameter vector (layout per family)
    cov: np.ndarray             # inverse expected information at the optimum
    loglik: float
    n_iter: int
    step_norm: float
    converged: bool
    columns: list
    n_levels: int = 2           # response categories (multinomial/ordinal)
    builder: DesignBuilder | None = None

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov))

    def summary_frame(self):
        return pd.DataFrame({"term": self.param_names(),
                             "estimate": self.coef, "se": self.se})

    def param_names(self):
        if self.family == "multinomial":
            return [f"{c}:{k}" for k in range(1, self.n_levels)
                    for c in self.columns]
        if self.family == "ordinal":
            return list(self.columns) + [f"cut_{j}" for j in range(self.n_levels - 1)]
        return list(self.columns)


def _check_inputs(X, y, family, weights):
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    dm = X if isinstance(X, DesignMatrix) else DesignMatrix(
        np.asarray(X, float), [f"x{j}" for j in range(np.asarray(X).shape[1])])
    y = np.asarray(y, dtype=float)
    if y.shape[0] != dm.n:
        raise ValueError("response length does not match design rows")
    w = np.ones(dm.n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape[0] != dm.n or (w <= 0).any():
        raise ValueError("case weights must be positive and match rows")
    if family == "binomial" and not np.isin(y, [0.0, 1.0]).all():
        raise ValueError("binomial response must be 0/1")
    if family in ("multinomial", "ordinal"):
        if not np.array_equal(y, np.round(y)) or y.min() < 0:
            raise ValueError("categorical response must be category indices")
    return dm, y, w


def _solve_info(H, g, columns):
    try:
        # factorization failure signals collinearity
        from scipy.linalg import cho_factor, cho_solve
        c, low = cho_factor(H)
        return cho_solve((c, low), g)
    except np.linalg.LinAlgError:
        raise _singular(H, columns)
    except Exception:
        raise _singular(H, columns)


def _singular(H, columns):
    d = np.diag(H).copy()
    d[d <= 0] = np.inf
    corr = H / np.sqrt(np.outer(d, d))
    np.fill_diagonal(corr, 0.0)
    i, j = np.unravel_index(np.argmax(np.abs(corr)), corr.shape)
    ncol = len(columns)
    cols = [columns[i % ncol], columns[j % ncol]]
    return SingularMatrixError(
        f"singular information matrix; near-collinear columns: {cols}",
        columns=cols)


def _invert_info(H, columns):
    try:
        return np.linalg.inv(H)
    except np.linalg.LinAlgError:
        raise _singular(H, columns)


def fit_glm(X, y, family, case_weights=None):
    """Weighted maximum-likelihood fit by Fisher scoring.

    Convergence: relative coefficient-step max-norm < 1e-8 within 100
    iterations. Covariance is the inverse expected information at the
    optimum. Raises SeparationError / SingularMatrixError / ConvergenceError.
    """
    dm, y, w = _check_inputs(X, y, family, case_weights)
    if family == "gaussian":
        return _fit_gaussian(dm, y, w)
    if family == "binomial":
        return _fit_binomial(dm, y, w)
    if family == "multinomial":
        return _fit_multinomial(dm, y, w)
    return _fit_ordinal(dm, y, w)


def _fit_gaussian(dm, y, w):
    Xw = dm.X * w[:, None]
    H = dm.X.T @ Xw
    beta = _solve_info(H, Xw.T @ y, dm.columns)
    r = y - dm.X @ beta
    n = w.sum()
    sigma2 = float(w @ r**2) / n
    sigma2 = max(sigma2, 1e-300)
    loglik = -0.5 * n * (np.log(2 * np.pi * sigma2) + 1.0)
    cov = _invert_info(H / sigma2, dm.columns)
    return GlmFit("gaussian", beta, cov, loglik, 1, 0.0, True, list(dm.columns))


def _relstep(step, beta):
    return float(np.max(np.abs(step)) / max(1.0, np.max(np.abs(beta))))


def _check_separation(eta, beta, columns):
    if np.max(np.abs(eta)) > SEPARATION_ETA:
        order = np.argsort(-np.abs(beta))
        culprits = [columns[j] for j in order[:3] if abs(beta[j]) > 5.0]
        raise SeparationError(
            "complete or quasi-complete separation detected "
            f"(|linear predictor| > {SEPARATION_ETA:g}); "
            f"culprit columns: {culprits or [columns[int(order[0])]]}",
            columns=culprits or [columns[int(order[0])]])


def _fit_binomial(dm, y, w):
    beta = np.zeros(dm.p)
    trace = []
    for it in range(1, MAX_ITER + 1):
        eta = dm.X @ beta
        p = expit(eta)
        g = dm.X.T @ (w * (y - p))
        W = w * p * (1 - p)
        H = dm.X.T @ (dm.X * np.maximum(W, 1e-12)[:, None])
        step = _solve_info(H, g, dm.columns)
        beta = beta + step
        rel = _relstep(step, beta)
        trace.append(rel)
        if rel < STEP_TOL:
            _check_separation(dm.X @ beta, beta, dm.columns)
            ll = float(w @ (y * (dm.X @ beta) - np.logaddexp(0.0, dm.X @ beta)))
            p = expit(dm.X @ beta)
            W = w * p * (1 - p)
            cov = _invert_info(dm.X.T @ (dm.X * W[:, None]), dm.columns)
            return GlmFit("binomial", beta, cov, ll, it, rel, True, list(dm.columns))
        _check_separation(eta, beta, dm.columns)
    raise ConvergenceError(
        f"binomial fit did not converge in {MAX_ITER} iterations", trace=trace)


def _multinomial_probs(X, B):
    # B: (K-1, p); class 0 is the reference with logit 0
    eta = X @ B.T                       # (n, K-1)
    full = np.column_stack([np.zeros(len(X)), eta])
    return np.exp(full - logsumexp(full, axis=1, keepdims=True))


def _fit_multinomial(dm, y, w):
    K = int(y.max()) + 1
    if K < 2:
        raise ValueError("multinomial response needs >= 2 observed categories")
    n, p = dm.n, dm.p
    Y = np.zeros((n, K))
    Y[np.arange(n), y.astype(int)] = 1.0
    B = np.zeros((K - 1, p))
    trace = []
    for it in range(1, MAX_ITER + 1):
        P = _multinomial_probs(dm.X, B)
        g = ((Y - P)[:, 1:] * w[:, None]).T @ dm.X          # (K-1, p)
        H = np.zeros(((K - 1) * p, (K - 1) * p))
        for a in range(1, K):
            for b in range(1, K):
                Wab = w * P[:, a] * ((a == b) - P[:, b])
                H[(a - 1) * p:a * p, (b - 1) * p:b * p] = dm.X.T @ (dm.X * Wab[:, None])
        step = _solve_info(H, g.ravel(), dm.columns)
        B = B + step.reshape(K - 1, p)
        rel = _relstep(step, B.ravel())
        trace.append(rel)
        eta = dm.X @ B.T
        if rel < STEP_TOL:
            _check_separation(eta, B.ravel(),
                              [c for _ in range(K - 1) for c in dm.columns])
            P = _multinomial_probs(dm.X, B)
            ll = float(w @ np.log(np.maximum(P[np.arange(n), y.astype(int)], 1e-300)))
            cov = _invert_info(H, dm.columns)
            return GlmFit("multinomial", B.ravel(), cov, ll, it, rel, True,
                          list(dm.columns), n_levels=K)
        _check_separation(eta, B.ravel(),
                          [c for _ in range(K - 1) for c in dm.columns])
    raise ConvergenceError(
        f"multinomial fit did not converge in {MAX_ITER} iterations", trace=trace)


def _ordinal_cumprobs(X, beta, cuts):
    # P(Y <= j) = expit(cut_j - X beta); cuts strictly increasing
    eta = X @ beta
    return expit(cuts[None, :] - eta[:, None])      # (n, K-1)


def _ordinal_loglik_grad(X, y, w, beta, cuts):
    n, p = X.shape
    K = len(cuts) + 1
    C = _ordinal_cumprobs(X, beta, cuts)
    full = np.column_stack([np.zeros(n), C, np.ones(n)])
    probs = np.diff(full, axis=1)                   # (n, K)
    yi = y.astype(int)
    pi = np.maximum(probs[np.arange(n), yi], 1e-300)
    ll = float(w @ np.log(pi))

    # d log pi / d eta_linear and cutpoints, via the two bounding cumulatives
    dens = C * (1 - C)                              # logistic density at each cut
    upper = np.zeros((n, K - 1))
    lower = np.zeros((n, K - 1))
    for j in range(K - 1):
        upper[yi == j, j] = 1.0                     # cut_j is upper bound of class j
        lower[yi == j + 1, j] = 1.0                 # cut_j is lower bound of class j+1
    dpi_dcut = dens * (upper - lower)               # (n, K-1)
    g_cut = (w / pi) @ dpi_dcut
    dpi_deta = -dpi_dcut.sum(axis=1)                # eta enters every cut with -1
    g_beta = X.T @ (w / pi * dpi_deta)
    return ll, np.concatenate([g_beta, g_cut])


def _fit_ordinal(dm, y, w):
    """Proportional-odds fit; monotone cutpoints kept by a log-gap
    reparameterization inside the Newton loop."""
    K = int(y.max()) + 1
    if K < 2:
        raise ValueError("ordinal response needs >= 2 observed categories")
    n, p = dm.n, dm.p
    if INTERCEPT in dm.columns:
        # cutpoints play the intercept role
        keep = [j for j, c in enumerate(dm.columns) if c != INTERCEPT]
        sub = DesignMatrix(dm.X[:, keep], [dm.columns[j] for j in keep]) if keep \
            else DesignMatrix(np.zeros((n, 0)), [])
    else:
        sub = dm
    X = sub.X
    p = X.shape[1]

    # start cutpoints at the empirical cumulative logits
    cum = np.array([(w * (y <= j)).sum() / w.sum() for j in range(K - 1)])
    cum = np.clip(cum, 1e-3, 1 - 1e-3)
    cuts = np.log(cum / (1 - cum))
    cuts = np.maximum.accumulate(cuts + np.arange(K - 1) * 1e-6)
    beta = np.zeros(p)

    def to_raw(theta):
        b, a = theta[:p], theta[p:]
        c = np.empty(K - 1)
        c[0] = a[0]
        if K > 2:
            c[1:] = a[0] + np.cumsum(np.exp(a[1:]))
        return b, c

    def to_reparam(b, c):
        a = np.empty(K - 1)
        a[0] = c[0]
        if K > 2:
            a[1:] = np.log(np.maximum(np.diff(c), 1e-8))
        return np.concatenate([b, a])

    def jac_raw(theta):
        # d(beta, cuts) / d(theta): identity on beta, lower-triangular on cuts
        J = np.eye(p + K - 1)
        if K > 2:
            for j in range(1, K - 1):
                J[p + j, p] = 1.0
                for l in range(1, j + 1):
                    J[p + j, p + l] = np.exp(theta[p + l])
                J[p + j, p + j] = np.exp(theta[p + j])
                J[p + j, p + 1:p + j] = np.exp(theta[p + 1:p + j])
        return J

    def grad_reparam(theta):
        b, c = to_raw(theta)
        ll, g_raw = _ordinal_loglik_grad(X, y, w, b, c)
        return ll, jac_raw(theta).T @ g_raw, g_raw

    theta = to_reparam(beta, cuts)
    trace = []
    labels = list(sub.columns) + [f"cut_{j}" for j in range(K - 1)]
    for it in range(1, MAX_ITER + 1):
        ll, g, _ = grad_reparam(theta)
        # Fisher scoring with a finite-difference information matrix
        H = np.zeros((len(theta), len(theta)))
        h = 1e-6
        for j in range(len(theta)):
            tp = theta.copy()
            tp[j] += h
            _, gp, _ = grad_reparam(tp)
            H[:, j] = -(gp - g) / h
        H = 0.5 * (H + H.T)
        # ridge the FD Hessian if needed to keep the step well-posed
        try:
            step = np.linalg.solve(H + 1e-10 * np.eye(len(theta)), g)
        except np.linalg.LinAlgError:
            raise _singular(H, labels)
        # backtrack to keep the log-likelihood non-decreasing
        scale = 1.0
        for _ in range(30):
            cand = theta + scale * step
            ll_new, _, _ = grad_reparam(cand)
            if ll_new >= ll - 1e-12:
                break
            scale *= 0.5
        theta = theta + scale * step
        rel = _relstep(scale * step, theta)
        trace.append(rel)
        if rel < STEP_TOL:
            b, c = to_raw(theta)
            _check_separation(X @ b if p else np.zeros(n), b, sub.columns or ["x"])
            ll, g_raw = _ordinal_loglik_grad(X, y, w, b, c)
            # observed information in the original (beta, cuts) coordinates
            Hr = np.zeros((p + K - 1, p + K - 1))
            raw = np.concatenate([b, c])

            def graw(v):
                return _ordinal_loglik_grad(X, y, w, v[:p], v[p:])[1]

            g0 = graw(raw)
            for j in range(p + K - 1):
                vp = raw.copy()
                vp[j] += h
                Hr[:, j] = -(graw(vp) - g0) / h
            Hr = 0.5 * (Hr + Hr.T)
            cov = _invert_info(Hr, labels)
            return GlmFit("ordinal", raw, cov, ll, it, rel, True,
                          list(sub.columns), n_levels=K)
    raise ConvergenceError(
        f"ordinal fit did not converge in {MAX_ITER} iterations", trace=trace)


# -- prediction -------------------------------------------------------------


def _fit_matrix(fit, newdata):
    if isinstance(newdata, DesignMatrix):
        dm = newdata
    elif isinstance(newdata, pd.DataFrame):
        if fit.builder is None:
            raise ValueError("fit has no design builder; pass a DesignMatrix")
        dm = fit.builder.matrix(newdata)
    else:
        arr = np.asarray(newdata, dtype=float)
        dm = DesignMatrix(arr, [f"x{j}" for j in range(arr.shape[1])])
    cols = list(fit.columns)
    missing = [c for c in cols if c not in dm.columns]
    if missing:
        raise DataError(f"prediction data lacks design columns {missing}")
    idx = [dm.columns.index(c) for c in cols]
    return dm.X[:, idx]


def predict_glm(fit, newdata):
    """Predicted success probability (binomial), class-probability matrix
    (multinomial/ordinal), or mean (gaussian)."""
    X = _fit_matrix(fit, newdata)
    if fit.family == "gaussian":
        return X @ fit.coef
    if fit.family == "binomial":
        return expit(X @ fit.coef)
    if fit.family == "multinomial":
        B = fit.coef.reshape(fit.n_levels - 1, len(fit.columns))
        return _multinomial_probs(X, B)
    p = len(fit.columns)
    beta, cuts = fit.coef[:p], fit.coef[p:]
    C = _ordinal_cumprobs(X, beta, cuts)
    full = np.column_stack([np.zeros(len(X)), C, np.ones(len(X))])
    return np.diff(full, axis=1)


# -- stepwise selection -----------------------------------------------------


def _criterion_value(fit, name):
    k = len(fit.coef)
    if name == "aic":
        return -2 * fit.loglik + 2 * k
    if name == "bic":
        raise ValueError("bic requires n; use _criterion_value_n")
    raise ValueError(f"unknown criterion {name!r}")


def stepwise_select(X, y, family, scope, criterion="aic", base=None,
                    case_weights=None):
    """Bidirectional add/drop search over candidate column blocks.

    base blocks (default: just the intercept) are forced in. Ties are broken
    by scope order, so the search is deterministic. Returns
    (fit on the selected design, selected scope blocks).
    """
    if criterion not in ("aic", "bic"):
        raise ValueError(f"criterion must be aic or bic, got {criterion!r}")
    if base is None:
        base = [INTERCEPT] if INTERCEPT in X.blocks else []
    scope = [b for b in scope if b not in base]
    n = X.n

    def crit(fit):
        k = len(fit.coef)
        pen = 2.0 if criterion == "aic" else np.log(n)
        return -2.0 * fit.loglik + pen * k

    def fit_blocks(blocks):
        return fit_glm(X.subset(base + blocks), y, family, case_weights)

    selected = []
    current_fit = fit_blocks(selected)
    current = crit(current_fit)
    while True:
        best = None  # (crit, kind, block, fit)
        for b in scope:
            if b in selected:
                cand = [s for s in selected if s != b]
            else:
                cand = selected + [b]
            try:
                f = fit_blocks(cand)
            except (SeparationError, SingularMatrixError):
                continue
            c = crit(f)
            if c < current - 1e-9 and (best is None or c < best[0] - 1e-12):
                best = (c, cand, f)
        if best is None:
            return current_fit, selected
        current, selected, current_fit = best[0], best[1], best[2]


# -- diagnostics ------------------------------------------------------------


def auc(scores, labels):
    """Area under the ROC curve: Pr(score+ > score-) + 0.5 Pr(tie),
    computed exactly from midranks."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if not np.isin(labels, [0, 1]).all():
        raise ValueError("labels must be 0/1")
    n1 = int(labels.sum())
    n0 = len(labels) - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC undefined: only one class present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))
