"""Recursive binary partitioning for response propensities and for
tree-based imputation draws.

Default stopping follows the conditional-inference recipe: pick the
predictor with the smallest Bonferroni-adjusted association p-value and stop
when that p-value exceeds the significance threshold. A CART-style mode
(best Gini / SSE split, complexity-based stopping) is available as an
alternative. Leaf response rates are smoothed: (hits + a) / (n + 2a).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .errors import DataError


@dataclass
class TreeConfig:
    min_leaf: int = 20
    max_depth: int = 6
    alpha: float = 0.05           # stopping significance (ctree mode)
    min_decrease: float = 1e-7    # complexity stop (cart mode)
    smoothing: float = 0.5
    mode: str = "ctree"           # "ctree" | "cart"


@dataclass
class Node:
    n: int
    value: float                  # smoothed rate (binary) or mean (numeric)
    members: np.ndarray | None = None      # training row indices (leaves only)
    split_var: str | None = None
    split_point: float | None = None       # numeric threshold: x <= point goes left
    split_levels: frozenset | None = None  # categorical: level in set goes left
    left: "Node | None" = None
    right: "Node | None" = None
    p_value: float | None = None

    @property
    def is_leaf(self):
        return self.split_var is None


@dataclass
class PropensityTree:
    root: Node
    variables: list               # [(name, kind)] used at fit time
    config: TreeConfig
    response_type: str            # "binary" | "numeric"
    stopping: list = field(default_factory=list)   # (depth, reason) records

    def leaves(self):
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node)
            else:
                stack.extend([node.left, node.right])
        return out

    def apply(self, frame):
        """Route rows to leaves; returns an array of Node references."""
        out = np.empty(len(frame), dtype=object)
        idx = np.arange(len(frame))
        stack = [(self.root, idx)]
        while stack:
            node, rows = stack.pop()
            if len(rows) == 0:
                continue
            if node.is_leaf:
                out[rows] = node
                continue
            col = frame[node.split_var].iloc[rows] if node.split_var in frame.columns \
                else None
            if col is None:
                raise DataError(f"prediction data lacks variable {node.split_var!r}")
            if node.split_point is not None:
                go_left = col.to_numpy(dtype=float) <= node.split_point
            else:
                go_left = col.astype(str).isin(node.split_levels).to_numpy()
            stack.append((node.left, rows[go_left]))
            stack.append((node.right, rows[~go_left]))
        return out

    def predict(self, frame):
        return np.array([n.value for n in self.apply(frame)])


# -- association screening ---------------------------------------------------


def _assoc_pvalue(x, kind, y, y_binary):
    """p-value of the predictor/response association, or 1.0 when degenerate."""
    if kind in ("nominal", "ordinal"):
        levels, counts = np.unique(x.astype(str), return_counts=True)
        if len(levels) < 2:
            return 1.0
        if y_binary:
            table = np.array([[np.sum((x == l) & (y == v)) for v in (0, 1)]
                              for l in levels])
            if (table.sum(axis=1) == 0).any():
                return 1.0
            try:
                return float(stats.chi2_contingency(table)[1])
            except ValueError:
                return 1.0
        groups = [y[x == l] for l in levels if np.sum(x == l) > 1]
        if len(groups) < 2:
            return 1.0
        stat, p = stats.f_oneway(*groups)
        return 1.0 if np.isnan(p) else float(p)
    xv = np.asarray(x, dtype=float)
    if np.ptp(xv) == 0:
        return 1.0
    if y_binary:
        a, b = xv[y == 1], xv[y == 0]
        if len(a) < 2 or len(b) < 2 or min(a.std(), b.std()) == 0 and a.mean() == b.mean():
            return 1.0
        stat, p = stats.ttest_ind(a, b, equal_var=False)
    else:
        if np.ptp(y) == 0:
            return 1.0
        stat, p = stats.pearsonr(xv, y)
    return 1.0 if np.isnan(p) else float(p)


# -- split search -------------------------------------------------------------


def _impurity_gain(y, go_left, y_binary):
    nl, nr = go_left.sum(), (~go_left).sum()
    if nl == 0 or nr == 0:
        return -np.inf
    if y_binary:
        def gini(v):
            p = v.mean()
            return p * (1 - p)
        return gini(y) - (nl * gini(y[go_left]) + nr * gini(y[~go_left])) / len(y)
    def sse(v):
        return float(((v - v.mean()) ** 2).sum())
    return (sse(y) - sse(y[go_left]) - sse(y[~go_left])) / len(y)


def _best_split_numeric(x, y, min_leaf, y_binary):
    order = np.argsort(x, kind="stable")
    xs = x[order]
    uniq = np.unique(xs)
    if len(uniq) < 2:
        return None
    thresholds = (uniq[:-1] + uniq[1:]) / 2.0
    best = None
    for thr in thresholds:
        go_left = x <= thr
        if go_left.sum() < min_leaf or (~go_left).sum() < min_leaf:
            continue
        gain = _impurity_gain(y, go_left, y_binary)
        if best is None or gain > best[0] + 1e-15:
            best = (gain, thr)
    if best is None:
        return None
    return {"point": float(best[1]), "gain": best[0]}


def _best_split_categorical(x, y, min_leaf, y_binary):
    x = x.astype(str)
    levels = np.unique(x)
    if len(levels) < 2:
        return None
    means = np.array([y[x == l].mean() for l in levels])
    order = np.argsort(means, kind="stable")
    best = None
    for cut in range(1, len(levels)):
        left = frozenset(levels[order[:cut]])
        go_left = np.isin(x, list(left))
        if go_left.sum() < min_leaf or (~go_left).sum() < min_leaf:
            continue
        gain = _impurity_gain(y, go_left, y_binary)
        if best is None or gain > best[0] + 1e-15:
            best = (gain, left)
    if best is None:
        return None
    return {"levels": best[1], "gain": best[0]}


# -- growing ------------------------------------------------------------------


def fit_tree(frame, variables, response, config=None, response_type="binary"):
    """Grow a binary tree of `response` on the typed predictor `variables`.

    All-constant predictors give a root-only tree, never an error.
    """
    config = config or TreeConfig()
    if config.mode not in ("ctree", "cart"):
        raise ValueError(f"unknown tree mode {config.mode!r}")
    y = np.asarray(response, dtype=float)
    y_binary = response_type == "binary"
    if y_binary and not np.isin(y, [0.0, 1.0]).all():
        raise ValueError("binary response must be 0/1")
    for name, _ in variables:
        if frame[name].isna().any():
            raise DataError(f"tree predictor {name!r} has missing values")

    a = config.smoothing
    stopping = []

    def leaf_value(rows):
        if y_binary:
            return float((y[rows].sum() + a) / (len(rows) + 2 * a))
        return float(y[rows].mean())

    def grow(rows, depth):
        node = Node(n=len(rows), value=leaf_value(rows), members=rows)
        if depth >= config.max_depth or len(rows) < 2 * config.min_leaf:
            stopping.append((depth, "size"))
            return node
        if np.ptp(y[rows]) == 0:
            stopping.append((depth, "pure"))
            return node

        cols = {name: frame[name].iloc[rows].to_numpy() for name, _ in variables}
        chosen = None
        if config.mode == "ctree":
            pvals = []
            for name, kind in variables:
                p = _assoc_pvalue(cols[name], kind, y[rows], y_binary)
                pvals.append((p, name, kind))
            m = len(pvals)
            p, name, kind = min(pvals, key=lambda t: t[0])
            p_adj = min(1.0, p * m)
            if p_adj > config.alpha:
                stopping.append((depth, "significance"))
                return node
            chosen = [(name, kind)]
            node.p_value = p_adj
        else:
            chosen = list(variables)

        best = None  # (gain, name, split dict)
        for name, kind in chosen:
            x = cols[name]
            if kind in ("nominal", "ordinal"):
                s = _best_split_categorical(x, y[rows], config.min_leaf, y_binary)
            else:
                s = _best_split_numeric(np.asarray(x, float), y[rows],
                                        config.min_leaf, y_binary)
            if s is not None and (best is None or s["gain"] > best[0] + 1e-15):
                best = (s["gain"], name, kind, s)
        if best is None or best[0] <= config.min_decrease:
            stopping.append((depth, "no-split"))
            return node

        _, name, kind, s = best
        x = cols[name]
        if "point" in s:
            go_left = np.asarray(x, float) <= s["point"]
            node.split_point = s["point"]
        else:
            go_left = np.isin(x.astype(str), list(s["levels"]))
            node.split_levels = s["levels"]
        node.split_var = name
        node.members = None
        node.left = grow(rows[go_left], depth + 1)
        node.right = grow(rows[~go_left], depth + 1)
        return node

    root = grow(np.arange(len(frame)), 0)
    return PropensityTree(root=root, variables=list(variables), config=config,
                          response_type=response_type, stopping=stopping)


def fit_propensity_tree(frame, variables, response, config=None):
    """Response-propensity tree: binary response, smoothed leaf rates."""
    return fit_tree(frame, variables, response, config, response_type="binary")
