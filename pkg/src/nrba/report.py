"""Markdown method-comparison report assembled from pipeline artifacts.

Display values are rounded to 2 decimals; the CSVs keep full precision.
"""

from __future__ import annotations

from pathlib import Path

import pandas as pd


def _md_table(frame, floatfmt="{:.2f}"):
    cols = list(frame.columns)
    lines = ["| " + " | ".join(cols) + " |",
             "| " + " | ".join("---" for _ in cols) + " |"]
    for _, row in frame.iterrows():
        cells = []
        for c in cols:
            v = row[c]
            cells.append(floatfmt.format(v) if isinstance(v, float) else str(v))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def render_report(outdir, methods):
    outdir = Path(outdir)
    est = pd.read_csv(outdir / "estimates.csv")
    parts = ["# Nonresponse bias analysis report", "",
             "Methods compared: " + ", ".join(methods), ""]

    means = est[est["estimand"].str.startswith("mean:") &
                ~est["estimand"].str.contains(r"\|")]
    if len(means):
        wide = means.pivot(index="method", columns="estimand", values="est")
        wide = wide.reset_index()
        parts += ["## Outcome means by wave and method", "",
                  _md_table(wide), ""]

    coefs = est[est["estimand"].str.startswith("coef:")]
    if len(coefs):
        parts += ["## Model coefficients", "",
                  _md_table(coefs[["method", "estimand", "est", "se",
                                   "lower", "upper"]]), ""]

    diag_path = outdir / "weight_diagnostics.csv"
    if diag_path.exists():
        diag = pd.read_csv(diag_path)
        parts += ["## Weight diagnostics", "", _md_table(diag), ""]

    sens_path = outdir / "sensitivity.csv"
    if sens_path.exists():
        sens = pd.read_csv(sens_path)
        overall = sens[sens["estimand"].str.startswith("mean:") &
                       ~sens["estimand"].str.contains(r"\|")]
        if len(overall):
            wide = overall.pivot(index="method", columns="estimand",
                                 values="est").reset_index()
            parts += ["## Dropout-offset sensitivity sweep", "",
                      _md_table(wide), ""]

    bygroup = outdir / "estimates_by_group.csv"
    if bygroup.exists():
        parts += ["## Plot-ready subgroup estimates", "",
                  f"See `{bygroup.name}` for subgroup-by-wave estimates.", ""]

    return "\n".join(parts)
