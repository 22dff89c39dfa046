"""Nonresponse bias analysis for longitudinal panels: attrition weighting,
sequential multiple imputation with MNAR offset sensitivity, mixed-model and
GEE estimation, and a synthetic-cohort simulator."""

__version__ = "0.1.0"

from .errors import (ConfigError, ConvergenceError, DataError, NrbaError,
                     NumericalError, SeparationError, SingularMatrixError)
from .panel import (PanelDataset, VariableSpec, load_panel, load_schema,
                    monotonize, summarize_patterns, validate_schema)
from .glm import DesignBuilder, DesignMatrix, auc, fit_glm, predict_glm, stepwise_select
from .tree import PropensityTree, TreeConfig, fit_propensity_tree, fit_tree
from .simulate import CohortScenario, CohortTruth, simulate_cohort
from .weighting import (PropensityModelSpec, WeightSet, baseline_weights,
                        base_weight_set, bootstrap_se, cca_weights,
                        sequential_weights, trim_weights, weight_diagnostics,
                        weighted_mean)
from .imputation import (ImputationSet, ImputerSpec, PooledEstimate,
                         apply_offset, impute_item_nonresponse, pmm_draw,
                         pool, sequential_mi)
from .models import (AnalysisFormula, GeeFit, MixedFit, build_design,
                     fit_gee, fit_mixed, long_frame)
from .estimate import VALID_TAGS, EstimateTable, estimate_table

__all__ = [name for name in dir() if not name.startswith("_")]
