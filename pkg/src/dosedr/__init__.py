"""Doubly robust estimation of continuous dose-response curves with surrogate
outcomes and partially missing labels."""
from __future__ import annotations

from ._backend import BACKEND
from .data import ColumnRoles, Dataset, FoldAssignment, load_csv, save_csv, split_folds, validate
from .errors import (
    BandwidthSelectionError,
    ConfigError,
    DataError,
    DegenerateWindowError,
    DoseDRError,
    FitError,
    SimulationError,
)
from .estimator import (
    DoseResponseEstimate,
    EstimationConfig,
    crossfit_plugin,
    dr_estimate,
    estimate,
    influence_se,
    initial_estimate,
    oracle_estimate,
    plugin_estimate,
    pseudo_outcomes,
    supervised_estimate,
)
from .nuisance import FeatureMap, NuisanceBundle, NuisanceLearners, fit_nuisances
from .smoother import (
    KernelSpec,
    get_kernel,
    local_linear_point,
    loocv_bandwidth,
    self_weight,
    smoother_weights,
)

__version__ = "0.1.0"
