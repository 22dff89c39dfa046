import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from nrba.panel import PanelDataset, VariableSpec, load_panel, load_schema
from nrba.simulate import CohortScenario, simulate_cohort

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def fixture_paths():
    return DATA_DIR / "fixture.csv", DATA_DIR / "fixture_schema.json"


@pytest.fixture(scope="session")
def fixture_data(fixture_paths):
    csv, schema = fixture_paths
    return load_panel(csv, load_schema(schema))


@pytest.fixture(scope="session")
def mar_cohort():
    """Medium MAR cohort with informative dropout and lognormal base weights."""
    sc = CohortScenario(n=900, seed=7, hazard_prev=-0.10, base_weight_sd=0.3)
    return simulate_cohort(sc)


def tiny_panel(y, base_weights=None, cluster=None, z=None):
    """Hand-built panel from an outcome matrix (nan = nonresponse)."""
    y = np.asarray(y, dtype=float)
    n, tp1 = y.shape
    schema = [
        VariableSpec("cl", "numeric", "cluster"),
        VariableSpec("bw", "numeric", "weight"),
        VariableSpec("z", "numeric", "invariant"),
        VariableSpec("y", "numeric", "outcome"),
    ]
    df = pd.DataFrame({
        "unit_id": [f"u{i}" for i in range(n)],
        "cl": np.arange(n, dtype=float) if cluster is None else np.asarray(cluster, float),
        "bw": np.ones(n) if base_weights is None else np.asarray(base_weights, float),
        "z": np.zeros(n) if z is None else np.asarray(z, float),
    })
    for t in range(tp1):
        df[f"y_w{t}"] = y[:, t]
    response = (~np.isnan(y)).astype(int)
    return PanelDataset(df=df, schema=schema, n_waves=tp1 - 1, response=response)


@pytest.fixture
def make_panel():
    return tiny_panel
