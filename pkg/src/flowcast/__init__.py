"""Region-to-region flow forecasting from trip records.

The pipeline partitions trip endpoints into density-based regions, bins
trips into hourly origin-destination flow matrices, extracts interpretable
base matrices by sparse subspace clustering, fits graph-regularized sparse
reconstruction coefficients under a Poisson factor model, and forecasts
future flows through averaged coefficient transitions.
"""

__version__ = "0.1.0"

from .errors import ConfigError, ConvergenceError, DataError, FlowcastError
from .geo import (GeoPoint, PartitionParams, Region, RegionMap, assign_region,
                  build_region_map, dbscan)
from .tensor import (FlowTensor, FragmentIndex, FragmentSpec, TripRecord,
                     build_tensor, in_out_flow, laplacian, periodicity_weights)
from .patterns import (AdmmParams, BasisSet, SelfExpressCoeffs, SimilarityGraph,
                       build_similarity, construct_bases, extract_patterns,
                       solve_self_expressive, spectral_cluster)
from .reconstruction import (CoefficientMatrix, ObjectiveParams, PgOptions, PgState,
                             coefficient_gradient, fit_alternating, fit_coefficients,
                             graph_penalty, negative_log_likelihood, prox_l1)
from .forecast import (Forecast, TransitionModel, build_transition_model,
                       predict_horizon, predict_row, solve_transition)
from .metrics import MetricReport, compare, ha_baseline, mae, rmse

__all__ = [
    "ConfigError", "ConvergenceError", "DataError", "FlowcastError",
    "GeoPoint", "PartitionParams", "Region", "RegionMap", "assign_region",
    "build_region_map", "dbscan",
    "FlowTensor", "FragmentIndex", "FragmentSpec", "TripRecord", "build_tensor",
    "in_out_flow", "laplacian", "periodicity_weights",
    "AdmmParams", "BasisSet", "SelfExpressCoeffs", "SimilarityGraph",
    "build_similarity", "construct_bases", "extract_patterns",
    "solve_self_expressive", "spectral_cluster",
    "CoefficientMatrix", "ObjectiveParams", "PgOptions", "PgState",
    "coefficient_gradient", "fit_alternating", "fit_coefficients",
    "graph_penalty", "negative_log_likelihood", "prox_l1",
    "Forecast", "TransitionModel", "build_transition_model", "predict_horizon",
    "predict_row", "solve_transition",
    "MetricReport", "compare", "ha_baseline", "mae", "rmse",
]
