"""Command-line pipeline: pattern -> weights -> impute -> estimate ->
sensitivity -> report, plus a synthetic-cohort generator.

All artifacts are plain CSV/JSON/Markdown with no timestamps, so a fixed
(config, seed) pair reproduces byte-identical outputs; run metadata lives
only in manifest.json. Exit codes: 0 success, 2 configuration error,
3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import (ConfigError, ConvergenceError, DataError, NrbaError,
                     NumericalError)
from .estimate import VALID_TAGS, estimate_table
from .imputation import (ImputationSet, ImputerSpec, impute_item_nonresponse,
                         sequential_mi)
from .models import AnalysisFormula
from .panel import load_panel, load_schema, summarize_patterns
from .simulate import CohortScenario, simulate_cohort
from .tree import TreeConfig
from .weighting import (PropensityModelSpec, baseline_weights, cca_weights,
                        sequential_weights, trim_weights, weight_diagnostics)

CONFIG_KEYS = {
    "input", "schema", "out", "seed", "methods", "formula", "weight_model",
    "trim_quantile", "imputer", "m", "iterations", "offsets", "bootstrap_b",
    "subgroup", "group_by", "weight_power", "scenario", "threads",
}

FLOAT_FMT = "%.12g"


@dataclasses.dataclass
class RunConfig:
    raw: dict
    seed: int
    out: Path
    threads: int = 1

    @classmethod
    def load(cls, path, seed_override=None, out_override=None, threads=1):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        unknown = sorted(set(raw) - CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        seed = seed_override if seed_override is not None else raw.get("seed")
        if seed is None:
            raise ConfigError("a seed is required (config 'seed' or --seed)")
        out = Path(out_override or raw.get("out") or "nrba-out")
        methods = raw.get("methods", [])
        bad = [t for t in methods if t not in VALID_TAGS]
        if bad:
            raise ConfigError(f"unknown method tag(s) {bad}; "
                              f"valid tags: {list(VALID_TAGS)}")
        if raw.get("offsets") is not None and methods and \
                not any(t.startswith("MI") for t in methods):
            raise ConfigError("offsets are only valid with MI methods")
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        return cls(raw=raw, seed=int(seed), out=out, threads=threads)

    def get(self, key, default=None):
        return self.raw.get(key, default)

    def require_data(self):
        for key in ("input", "schema"):
            val = self.get(key)
            if val is None:
                raise ConfigError(f"config key {key!r} is required")
            if not Path(val).exists():
                raise ConfigError(f"{key} file not found: {val}")

    def hash(self):
        canon = json.dumps({**self.raw, "seed": self.seed}, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()

    def formula(self):
        f = self.get("formula")
        if f is None:
            return None
        known = {"outcome", "numeric", "standardize", "quadratic", "binary",
                 "nominal", "interaction", "wave_dummies"}
        unknown = sorted(set(f) - known)
        if unknown:
            raise ConfigError(f"unknown formula keys: {unknown}")
        if "outcome" not in f:
            raise ConfigError("formula needs an 'outcome'")
        return AnalysisFormula(
            outcome=f["outcome"],
            numeric_terms=tuple(f.get("numeric", ())),
            standardize=tuple(f.get("standardize", ())),
            quadratic=tuple(f.get("quadratic", ())),
            binary_terms=tuple(f.get("binary", ())),
            nominal_terms=tuple(f.get("nominal", ())),
            wave_dummies=bool(f.get("wave_dummies", True)),
            interaction=f.get("interaction"))

    def weight_model(self):
        wm = self.get("weight_model")
        if wm is None:
            return None
        tree = TreeConfig(**wm.get("tree", {})) if "tree" in wm else TreeConfig()
        return PropensityModelSpec(
            kind=wm.get("kind", "glm"), stepwise=bool(wm.get("stepwise", False)),
            criterion=wm.get("criterion", "aic"),
            include_base_weight=bool(wm.get("include_base_weight", True)),
            tree=tree)

    def imputer(self):
        im = self.get("imputer")
        if im is None:
            return ImputerSpec()
        known = {"methods", "pmm_donors", "offset_group", "include_base_weight"}
        unknown = sorted(set(im) - known)
        if unknown:
            raise ConfigError(f"unknown imputer keys: {unknown}")
        return ImputerSpec(methods=dict(im.get("methods", {})),
                           pmm_donors=int(im.get("pmm_donors", 5)),
                           offset_group=im.get("offset_group"),
                           include_base_weight=bool(
                               im.get("include_base_weight", True)))


# -- manifest ----------------------------------------------------------------


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Manifest:
    def __init__(self, outdir, config_hash):
        self.path = Path(outdir) / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"version": __version__, "created": time.time(),
                         "config_hash": config_hash, "stages": {},
                         "warnings": []}
        self.data["config_hash"] = config_hash
        self.data["version"] = __version__

    def stage_fresh(self, name, outputs):
        """True when the stage's recorded outputs all exist unchanged."""
        rec = self.data["stages"].get(name)
        if rec is None:
            return False
        for rel, dig in rec["outputs"].items():
            p = self.path.parent / rel
            if not p.exists() or _digest(p) != dig:
                return False
        return set(rec["outputs"]) == {str(p) for p in outputs}

    def record(self, name, outputs, new_warnings):
        self.data["stages"][name] = {
            "outputs": {str(rel): _digest(self.path.parent / rel)
                        for rel in outputs},
            "completed": time.time()}
        for w in new_warnings:
            if w not in self.data["warnings"]:
                self.data["warnings"].append(w)
        self.data["updated"] = time.time()
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True))


# -- stage helpers -------------------------------------------------------------


def _write_csv(frame, path):
    frame.to_csv(path, index=False, float_format=FLOAT_FMT)


def _load_data(cfg):
    cfg.require_data()
    return load_panel(cfg.get("input"), load_schema(cfg.get("schema")))


def _build_weight_sets(cfg, data):
    model = cfg.weight_model()
    trim = cfg.get("trim_quantile")
    covs = [v.column(t) for v in data.variables(roles=("covariate",))
            for t in range(data.n_waves + 1)]
    if covs and data.df[covs].isna().to_numpy().any():
        # propensity models need complete covariates at responding waves
        data = impute_item_nonresponse(data, cfg.imputer(), seed=cfg.seed)
    sets = [cca_weights(data, model)]
    sets += [baseline_weights(data, t, model)
             for t in range(1, data.n_waves + 1)]
    sets += sequential_weights(data, model)
    if trim is not None:
        sets = [trim_weights(ws, float(trim)) for ws in sets]
    return sets


def _imputed_path(outdir, j, k=None):
    if k is None:
        return Path(outdir) / f"imputed_m{j}.csv"
    return Path(outdir) / f"imputed_k{k:g}_m{j}.csv"


def _build_or_reuse_imputations(cfg, data, outdir, k=None):
    """Load completed copies from a prior impute/sensitivity run when all
    files are present; otherwise impute now and write them."""
    m = int(cfg.get("m", 5))
    iterations = int(cfg.get("iterations", 15))
    paths = [_imputed_path(outdir, j, k) for j in range(m)]
    schema = load_schema(cfg.get("schema"))
    if all(p.exists() for p in paths):
        copies = [load_panel(p, schema) for p in paths]
        T = data.n_waves
        return ImputationSet(datasets=copies, m=m, iterations=iterations,
                             offsets=np.full(T, 0.0 if k is None else k),
                             sigma_tables=[], seed=cfg.seed), paths, True
    imp = sequential_mi(data, cfg.imputer(), m=m, offsets=k, seed=cfg.seed,
                        iterations=iterations)
    for j, d in enumerate(imp.datasets):
        d.to_csv(paths[j])
    return imp, paths, False


# -- subcommands ----------------------------------------------------------------


def cmd_simulate(cfg):
    scen = cfg.get("scenario")
    if scen is None:
        raise ConfigError("simulate needs a 'scenario' config section")
    fields = {f.name for f in dataclasses.fields(CohortScenario)}
    unknown = sorted(set(scen) - fields)
    if unknown:
        raise ConfigError(f"unknown scenario fields: {unknown}; "
                          f"valid fields: {sorted(fields)}")
    scen = {k: tuple(v) if isinstance(v, list) else v for k, v in scen.items()}
    data, truth = simulate_cohort(CohortScenario(seed=cfg.seed, **{
        k: v for k, v in scen.items() if k != "seed"}))
    outdir = cfg.out
    data.to_csv(outdir / "data.csv")
    schema_json = [{"name": v.name, "kind": v.kind, "role": v.role,
                    "levels": list(v.levels)} for v in data.schema]
    (outdir / "schema.json").write_text(json.dumps(schema_json, indent=2))
    complete = truth.complete_df.copy()
    complete["dropout_wave"] = truth.dropout_wave
    _write_csv(complete, outdir / "truth.csv")
    _write_csv(pd.DataFrame({"wave": np.arange(data.n_waves + 1),
                             "mean": truth.mean_by_wave}),
               outdir / "truth_means.csv")
    return ["data.csv", "schema.json", "truth.csv", "truth_means.csv"]


def cmd_pattern(cfg):
    data = _load_data(cfg)
    summary = summarize_patterns(data, group_by=cfg.get("group_by"))
    outdir = cfg.out
    _write_csv(summary.patterns, outdir / "patterns.csv")
    _write_csv(summary.wave_rates, outdir / "wave_rates.csv")
    _write_csv(summary.item_rates, outdir / "item_rates.csv")
    out = ["patterns.csv", "wave_rates.csv", "item_rates.csv"]
    if summary.group_rates is not None:
        _write_csv(summary.group_rates, outdir / "group_rates.csv")
        out.append("group_rates.csv")
    return out


def cmd_weights(cfg):
    data = _load_data(cfg)
    sets = _build_weight_sets(cfg, data)
    frames = [ws.frame() for ws in sets]
    diag = pd.DataFrame([weight_diagnostics(ws).row() for ws in sets])
    _write_csv(pd.concat(frames, ignore_index=True), cfg.out / "weights.csv")
    _write_csv(diag, cfg.out / "weight_diagnostics.csv")
    return ["weights.csv", "weight_diagnostics.csv"]


def cmd_impute(cfg):
    data = _load_data(cfg)
    imp, paths, reused = _build_or_reuse_imputations(cfg, data, cfg.out)
    meta = {"m": imp.m, "iterations": imp.iterations, "seed": cfg.seed,
            "offsets": list(imp.offsets), "reused": reused}
    (cfg.out / "impute.json").write_text(json.dumps(meta, indent=2,
                                                    sort_keys=True))
    return [p.name for p in paths] + ["impute.json"]


def cmd_estimate(cfg):
    data = _load_data(cfg)
    methods = cfg.get("methods") or []
    if not methods:
        raise ConfigError("no methods selected")
    imputation = None
    outputs = []
    if "MI-seq" in methods or "MI-offset" in methods:
        imputation, paths, _ = _build_or_reuse_imputations(cfg, data, cfg.out)
        outputs += [p.name for p in paths]
    offset_imps = None
    if "MI-offset" in methods:
        ks = cfg.get("offsets") or [-0.8, -1.2, -1.6]
        offset_imps, new = _offset_sets(cfg, data, ks)
        outputs += new
    tab = estimate_table(
        data, methods, formula=cfg.formula(),
        weight_model=cfg.weight_model(), imputation=imputation,
        offset_imputations=offset_imps, m=int(cfg.get("m", 5)),
        seed=cfg.seed, subgroup=cfg.get("subgroup"),
        weight_power=float(cfg.get("weight_power", 1.0)),
        imputer_spec=cfg.imputer())
    tab.to_csv(cfg.out / "estimates.csv")
    outputs.append("estimates.csv")
    sub = tab.frame[tab.frame["estimand"].str.contains(r"\|", regex=True)]
    if len(sub):
        _write_csv(_explode_subgroups(sub), cfg.out / "estimates_by_group.csv")
        outputs.append("estimates_by_group.csv")
    return outputs


def _offset_sets(cfg, data, ks):
    """One imputation set per offset k, fanned out across threads."""
    outputs = []
    def build(k):
        return k, _build_or_reuse_imputations(cfg, data, cfg.out, k=k)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(build, ks))
    else:
        results = [build(k) for k in ks]
    sets = {}
    for k, (imp, paths, _) in results:
        sets[k] = imp
        outputs += [p.name for p in paths]
    return sets, outputs


def _explode_subgroups(frame):
    rows = []
    for _, r in frame.iterrows():
        base, cond = r["estimand"].split("|", 1)
        var, level = cond.split("=", 1)
        rows.append({"method": r["method"], "wave": int(base.split(":w")[1]),
                     "group_var": var, "level": level, "est": r["est"],
                     "se": r["se"], "lower": r["lower"], "upper": r["upper"]})
    return pd.DataFrame(rows).sort_values(
        ["method", "group_var", "level", "wave"]).reset_index(drop=True)


def cmd_sensitivity(cfg):
    data = _load_data(cfg)
    ks = cfg.get("offsets") or [-0.8, -1.2, -1.6]
    sets, outputs = _offset_sets(cfg, data, ks)
    tab = estimate_table(data, ["MI-offset"], offset_imputations=sets,
                         m=int(cfg.get("m", 5)), seed=cfg.seed,
                         subgroup=cfg.get("subgroup"),
                         imputer_spec=cfg.imputer())
    tab.to_csv(cfg.out / "sensitivity.csv")
    return outputs + ["sensitivity.csv"]


def cmd_report(cfg):
    from .report import render_report
    methods = cfg.get("methods") or []
    if not methods:
        raise ConfigError("no methods selected")
    est_path = cfg.out / "estimates.csv"
    if not est_path.exists():
        raise DataError("estimates.csv not found; run 'nrba estimate' first")
    text = render_report(cfg.out, methods)
    (cfg.out / "report.md").write_text(text)
    return ["report.md"]


COMMANDS = {"simulate": cmd_simulate, "pattern": cmd_pattern,
            "weights": cmd_weights, "impute": cmd_impute,
            "estimate": cmd_estimate, "sensitivity": cmd_sensitivity,
            "report": cmd_report}


def build_parser():
    p = argparse.ArgumentParser(
        prog="nrba",
        description="Nonresponse bias analysis for longitudinal panels")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--threads", type=int, default=1,
                   help="fan-out width for independent sub-tasks")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, seed_override=args.seed,
                             out_override=args.out, threads=args.threads)
        cfg.out.mkdir(parents=True, exist_ok=True)
        manifest = Manifest(cfg.out, cfg.hash())
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            outputs = COMMANDS[args.command](cfg)
        manifest.record(args.command, outputs,
                        [str(w.message) for w in caught])
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (NumericalError, ConvergenceError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except NrbaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    for rel in outputs:
        print(cfg.out / rel)
    return 0


if __name__ == "__main__":
    sys.exit(main())
