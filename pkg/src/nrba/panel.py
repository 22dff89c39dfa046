"""Longitudinal panel data model: typed variables, response indicators,
missingness-pattern summaries, and monotonization.

The wide layout is one row per unit; a time-varying variable ``x`` observed at
waves 0..T occupies columns ``x_w0 .. x_wT``. The per-wave response indicator
R[i, t] is 1 exactly when the outcome of unit i is observed at wave t.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

UNIT_ID = "unit_id"

KINDS = ("numeric", "binary", "nominal", "ordinal")
ROLES = ("invariant", "covariate", "outcome", "cluster", "weight")
TIME_VARYING_ROLES = ("covariate", "outcome")


@dataclass(frozen=True)
class VariableSpec:
    """One variable in the panel schema.

    kind: numeric | binary | nominal | ordinal (nominal/ordinal need levels).
    role: invariant | covariate (time-varying) | outcome | cluster | weight.
    """

    name: str
    kind: str
    role: str
    levels: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"variable {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise ConfigError(f"variable {self.name!r}: unknown role {self.role!r}")
        if self.kind in ("nominal", "ordinal"):
            if not self.levels:
                raise ConfigError(f"variable {self.name!r}: {self.kind} needs levels")
            if len(set(self.levels)) != len(self.levels):
                raise ConfigError(f"variable {self.name!r}: duplicate levels")
        object.__setattr__(self, "levels", tuple(self.levels))

    @property
    def time_varying(self):
        return self.role in TIME_VARYING_ROLES

    def column(self, wave=None):
        if self.time_varying:
            if wave is None:
                raise ValueError(f"{self.name} is time-varying; wave required")
            return f"{self.name}_w{wave}"
        return self.name


def validate_schema(schema):
    """Check cross-variable schema invariants; return the schema unchanged."""
    names = [v.name for v in schema]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate variable names in schema")
    for role in ("cluster", "weight", "outcome"):
        k = sum(1 for v in schema if v.role == role)
        if k != 1:
            raise ConfigError(f"schema must declare exactly one {role} variable, got {k}")
    return schema


def load_schema(path):
    """Read a schema file: a JSON list of variable records."""
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ConfigError(f"{path}: schema must be a JSON list")
    schema = []
    for rec in raw:
        try:
            schema.append(VariableSpec(rec["name"], rec["kind"], rec["role"],
                                       tuple(rec.get("levels", ()))))
        except KeyError as e:
            raise ConfigError(f"{path}: schema record missing field {e}") from None
    return validate_schema(schema)


@dataclass
class PanelDataset:
    """Immutable wide-format panel: n units x (T+1) waves x typed variables."""

    df: pd.DataFrame            # wide table, one row per unit
    schema: list
    n_waves: int                # T; waves run 0..T
    response: np.ndarray        # (n, T+1) 0/1, R[i,t] = outcome observed

    def __post_init__(self):
        if len(self.df) == 0:
            raise DataError("panel has no units")
        if self.n_waves < 1:
            raise DataError("panel needs T >= 1 follow-up waves")
        self.response = np.asarray(self.response, dtype=int)
        if self.response.shape != (len(self.df), self.n_waves + 1):
            raise DataError("response indicator shape mismatch")

    # -- accessors ---------------------------------------------------------

    @property
    def n(self):
        return len(self.df)

    @property
    def unit_ids(self):
        return self.df[UNIT_ID].to_numpy()

    def var(self, name):
        for v in self.schema:
            if v.name == name:
                return v
        raise KeyError(name)

    @property
    def outcome(self):
        return next(v for v in self.schema if v.role == "outcome")

    @property
    def cluster_ids(self):
        name = next(v.name for v in self.schema if v.role == "cluster")
        return self.df[name].to_numpy()

    @property
    def base_weights(self):
        name = next(v.name for v in self.schema if v.role == "weight")
        return self.df[name].to_numpy(dtype=float)

    def values(self, name, wave=None):
        """Column of a variable (at a wave if time-varying), as a Series."""
        return self.df[self.var(name).column(wave)]

    def variables(self, roles=None):
        if roles is None:
            return list(self.schema)
        return [v for v in self.schema if v.role in roles]

    def is_monotone(self):
        r = self.response
        return bool(np.all(r[:, 1:] <= r[:, :-1]))

    def dropout_wave(self):
        """First wave with R=0 per unit, or T+1 for complete units."""
        r = self.response
        out = np.full(self.n, self.n_waves + 1, dtype=int)
        for t in range(self.n_waves, -1, -1):
            out[r[:, t] == 0] = t
        return out

    def replace(self, df=None, response=None):
        return PanelDataset(
            df=self.df.copy() if df is None else df,
            schema=self.schema,
            n_waves=self.n_waves,
            response=self.response.copy() if response is None else response,
        )

    def to_csv(self, path, missing=""):
        self.df.to_csv(path, index=False, na_rep=missing)


@dataclass
class PatternSummary:
    patterns: pd.DataFrame          # columns: pattern (string), count
    monotone: bool
    wave_rates: pd.DataFrame        # columns: wave, rate (relative to wave 0)
    group_rates: pd.DataFrame | None      # columns: group var, wave, rate
    item_rates: pd.DataFrame        # columns: variable, wave, rate

    def __post_init__(self):
        assert int(self.patterns["count"].sum()) > 0


# -- loading ---------------------------------------------------------------


def _parse_column(raw, spec, colname, missing):
    """Convert a raw string column to a typed Series, naming bad cells."""
    s = raw.replace({missing: np.nan}) if missing == "" else raw.replace({missing: np.nan, "": np.nan})
    if spec.kind == "numeric":
        out = pd.to_numeric(s, errors="coerce")
        bad = out.isna() & s.notna()
    elif spec.kind == "binary":
        out = pd.to_numeric(s, errors="coerce")
        bad = (out.isna() & s.notna()) | (~out.isin([0, 1]) & out.notna())
        out = out.where(~bad)
    else:
        levels = [str(l) for l in spec.levels]
        bad = ~s.isin(levels) & s.notna()
        out = pd.Categorical(s.where(~bad), categories=levels,
                             ordered=spec.kind == "ordinal")
        out = pd.Series(out, index=s.index)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(
            f"unparseable cell at row {row + 2}, column {colname!r}: "
            f"{raw.iloc[row]!r} is not a valid {spec.kind} value"
        )
    return out


def infer_n_waves(columns, schema):
    """Largest T such that the outcome column for wave T exists."""
    outcome = next(v for v in schema if v.role == "outcome")
    waves = []
    prefix = outcome.name + "_w"
    for c in columns:
        if c.startswith(prefix) and c[len(prefix):].isdigit():
            waves.append(int(c[len(prefix):]))
    if not waves or 0 not in waves:
        raise DataError(f"no wave-0 column {prefix}0 found")
    T = max(waves)
    if sorted(waves) != list(range(T + 1)):
        raise DataError(f"outcome columns must cover waves 0..{T} contiguously")
    return T


def load_panel(path, schema, missing=""):
    """Load a wide-format CSV against a schema.

    Units missing the wave-0 outcome are excluded (with a logged count);
    duplicate unit ids and negative base weights are errors.
    """
    validate_schema(schema)
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    if UNIT_ID not in raw.columns:
        raise DataError(f"{path}: required column {UNIT_ID!r} missing")
    if raw[UNIT_ID].duplicated().any():
        dup = raw[UNIT_ID][raw[UNIT_ID].duplicated()].iloc[0]
        raise DataError(f"duplicate unit id {dup!r}")
    T = infer_n_waves(raw.columns, schema)

    cols = {UNIT_ID: raw[UNIT_ID]}
    for v in schema:
        waves = range(T + 1) if v.time_varying else [None]
        for t in waves:
            c = v.column(t)
            if c not in raw.columns:
                raise DataError(f"{path}: schema variable column {c!r} missing")
            cols[c] = _parse_column(raw[c], v, c, missing)
    df = pd.DataFrame(cols)

    for v in schema:
        if v.role in ("cluster", "weight") and df[v.name].isna().any():
            raise DataError(f"design variable {v.name!r} has missing values")
    wname = next(v.name for v in schema if v.role == "weight")
    if (pd.to_numeric(df[wname]) <= 0).any():
        raise DataError(f"base weight {wname!r} must be strictly positive")
    df[wname] = pd.to_numeric(df[wname])

    outcome = next(v for v in schema if v.role == "outcome")
    base_ok = df[outcome.column(0)].notna()
    n_drop = int((~base_ok).sum())
    if n_drop:
        logger.info("load_panel: excluded %d units missing the wave-0 outcome", n_drop)
        df = df[base_ok].reset_index(drop=True)
    if len(df) == 0:
        raise DataError("no units with an observed wave-0 outcome")

    response = np.column_stack(
        [df[outcome.column(t)].notna().to_numpy().astype(int) for t in range(T + 1)]
    )
    return PanelDataset(df=df, schema=list(schema), n_waves=T, response=response)


# -- pattern summaries -----------------------------------------------------


def _pattern_strings(response):
    return np.array(["".join(map(str, row)) for row in response])


def summarize_patterns(data, group_by=None):
    """Response-pattern table, monotone verdict, and nonresponse rates.

    Wave rates are unit-nonresponse rates relative to wave 0 (all units
    respond at wave 0 by construction). Item rates count missing cells of
    non-outcome variables among responding units per wave.
    """
    pats = _pattern_strings(data.response)
    tab = pd.Series(pats).value_counts().sort_index(ascending=False)
    patterns = pd.DataFrame({"pattern": tab.index, "count": tab.to_numpy()})

    T = data.n_waves
    rates = 1.0 - data.response[:, 1:].mean(axis=0)
    wave_rates = pd.DataFrame({"wave": np.arange(1, T + 1), "rate": rates})

    group_rates = None
    if group_by is not None:
        spec = data.var(group_by)
        if spec.kind != "nominal":
            raise DataError(f"group_by variable {group_by!r} must be nominal")
        if spec.time_varying:
            raise DataError(f"group_by variable {group_by!r} must be time-invariant")
        rows = []
        g = data.df[spec.name]
        for level in spec.levels:
            mask = (g == level).to_numpy()
            if mask.sum() == 0:
                continue
            r = 1.0 - data.response[mask, 1:].mean(axis=0)
            for t in range(1, T + 1):
                rows.append({group_by: level, "wave": t, "rate": r[t - 1]})
        group_rates = pd.DataFrame(rows)

    item_rows = []
    for v in data.variables(roles=("invariant", "covariate")):
        if v.time_varying:
            for t in range(T + 1):
                resp = data.response[:, t] == 1
                if resp.sum() == 0:
                    continue
                rate = float(data.df.loc[resp, v.column(t)].isna().mean())
                item_rows.append({"variable": v.name, "wave": t, "rate": rate})
        else:
            rate = float(data.df[v.name].isna().mean())
            item_rows.append({"variable": v.name, "wave": -1, "rate": rate})
    item_rates = pd.DataFrame(item_rows, columns=["variable", "wave", "rate"])

    return PatternSummary(
        patterns=patterns,
        monotone=data.is_monotone(),
        wave_rates=wave_rates,
        group_rates=group_rates,
        item_rates=item_rates,
    )


# -- monotonization --------------------------------------------------------


def monotonize(data, mode="drop", seed=None):
    """Force a monotone response pattern.

    mode="drop": mask every observed wave after a unit's first nonresponse
    (intermittent returns become missing). mode="impute" fills the gap waves
    with a single draw from the sequential imputer instead.

    Returns (dataset, report); report rows are (unit_id, wave) pairs affected.
    """
    if mode not in ("drop", "impute"):
        raise ConfigError(f"unknown monotonize mode {mode!r}")
    r = data.response
    report = []
    if data.is_monotone():
        return data, report

    drop_wave = data.dropout_wave()
    if mode == "drop":
        df = data.df.copy()
        new_r = r.copy()
        tv = data.variables(roles=TIME_VARYING_ROLES)
        for i in np.flatnonzero(drop_wave <= data.n_waves):
            later = np.flatnonzero(r[i, drop_wave[i]:] == 1) + drop_wave[i]
            for t in later:
                for v in tv:
                    df.loc[df.index[i], v.column(t)] = np.nan
                new_r[i, t] = 0
                report.append((data.unit_ids[i], int(t)))
        return data.replace(df=df, response=new_r), report

    from .imputation import fill_intermittent  # local import: cyclic module pair

    return fill_intermittent(data, seed=seed)
