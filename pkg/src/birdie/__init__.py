"""Racial disparity estimation from BISG probabilities with BIRDiE."""

from .baseline import (check_identification, ols_estimate, ols_poststratify,
                       thresholding_estimate, weighting_bias_formula, weighting_estimate,
                       wtd_ols_equality_check)
from .bisg import bisg_predict
from .census import CensusTables, load_census_tables, make_census_tables
from .conditional import estimate_joint, estimate_two_step
from .data import DisparityEstimate, ProbMatrix, RecordTable
from .em import NonConvergenceError, bootstrap_pooling, estimate_from_fit, fit_birdie
from .metrics import log_score, map_accuracy, roc_auc, tv_distance
from .models import OutcomeModelSpec
from .sensitivity import (SurnameGroups, bias_bound, ols_perturbation_bias, refit_with_groups,
                          residual_correlation)
from .synth import DagConfig, generate, oracle_solve, random_config, true_disparity

__version__ = "0.1.0"

__all__ = [
    "CensusTables", "DagConfig", "DisparityEstimate", "NonConvergenceError",
    "OutcomeModelSpec", "ProbMatrix", "RecordTable", "SurnameGroups", "bias_bound",
    "bisg_predict", "bootstrap_pooling", "check_identification", "estimate_from_fit",
    "estimate_joint", "estimate_two_step", "fit_birdie", "generate", "load_census_tables",
    "log_score", "make_census_tables", "map_accuracy", "ols_estimate",
    "ols_perturbation_bias", "ols_poststratify", "oracle_solve", "random_config",
    "refit_with_groups", "residual_correlation", "roc_auc", "thresholding_estimate",
    "true_disparity", "tv_distance", "weighting_bias_formula", "weighting_estimate",
    "wtd_ols_equality_check",
]
