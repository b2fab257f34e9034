"""Bivariate CAR multiple-membership disease mapping fitted by Hamiltonian Monte Carlo."""

__version__ = "0.1.0"

from .cluster import (
    ClusterReport,
    bivariate_classify,
    classify,
    cluster_draws,
    cluster_report,
    exceedance_prob,
    locality_risk,
)
from .compare import dic, elpd_diff_se, fit_report, loo_elpd, saturated_deviance, tail_proportions, tap
from .diagnostics import DiagnosticsReport, ess_bulk, split_rhat, summarize
from .errors import CarmmError, NumericalError, ValidationError
from .graph import SpatialGraph, build_graph, car_logdet
from .hmc import FitConfig, PosteriorSamples, hmc_fit, initialize_chain
from .membership import MembershipMatrix, build_membership, mm_project
from .model import (
    Dataset,
    Hyperpriors,
    ModelSpec,
    ParameterState,
    compute_offsets,
    gmcar_logdensity,
    log_posterior,
    mcar_logdensity,
    negbin_logpmf,
    preprocess_covariates,
)
from .simulate import TruthSpec, generate_dataset, make_lattice, make_membership, simulate_scenario, study_truth
from .target import Posterior, from_unconstrained, grad_log_posterior, to_unconstrained

__all__ = [
    "ClusterReport", "bivariate_classify", "classify", "cluster_draws", "cluster_report",
    "exceedance_prob", "locality_risk",
    "dic", "elpd_diff_se", "fit_report", "loo_elpd", "saturated_deviance", "tail_proportions", "tap",
    "DiagnosticsReport", "ess_bulk", "split_rhat", "summarize",
    "CarmmError", "NumericalError", "ValidationError",
    "SpatialGraph", "build_graph", "car_logdet",
    "FitConfig", "PosteriorSamples", "hmc_fit", "initialize_chain",
    "MembershipMatrix", "build_membership", "mm_project",
    "Dataset", "Hyperpriors", "ModelSpec", "ParameterState", "compute_offsets", "gmcar_logdensity",
    "log_posterior", "mcar_logdensity", "negbin_logpmf", "preprocess_covariates",
    "TruthSpec", "generate_dataset", "make_lattice", "make_membership", "simulate_scenario", "study_truth",
    "Posterior", "from_unconstrained", "grad_log_posterior", "to_unconstrained",
]
