"""Doubly robust kernel estimation of continuous-treatment effect curves.

The estimator computes a covariate-adjusted pseudo-outcome per observation
and regresses it on the treatment with a local-linear kernel smoother; the
result is consistent whenever either the conditional treatment density or
the outcome regression model is correct.  The package provides kernel
primitives, nuisance model fitting, influence-function confidence
intervals, leave-one-out bandwidth selection, a reproducible simulation
harness, and a command-line interface.
"""

from .bandwidth import (
    BandwidthSearch,
    default_search_range,
    loo_risk,
    oracle_bandwidth,
    oracle_risk,
    select_bandwidth,
)
from .estimator import (
    EffectCurve,
    add_wald_ci,
    default_grid,
    estimate_curve,
    read_curve_csv,
    smoothed_target,
)
from .exceptions import (
    DegenerateScale,
    DomainError,
    DRCurveError,
    NoConvergence,
    RankDeficient,
    SingularDesign,
)
from .kernels import (
    KernelSpec,
    LocalFitBasis,
    eval_kernel,
    hat_diagonal,
    kernel_moments,
    local_linear_fit,
    pointwise_fit,
    smoother_row,
)
from .nuisance import (
    Dataset,
    FeatureMap,
    NuisanceFit,
    default_density_floor,
    fit_outcome_regression,
    fit_treatment_density_beta,
    fit_treatment_density_locscale,
    marginalize,
)
from .pseudo import InfluenceValues, PseudoOutcomes, compute_pseudo, influence_values
from .simulate import SimConfig, SimulationReport, generate_data, run_study, true_theta

__version__ = "0.1.0"

__all__ = [
    "BandwidthSearch",
    "Dataset",
    "DegenerateScale",
    "DomainError",
    "DRCurveError",
    "EffectCurve",
    "FeatureMap",
    "InfluenceValues",
    "KernelSpec",
    "LocalFitBasis",
    "NoConvergence",
    "NuisanceFit",
    "PseudoOutcomes",
    "RankDeficient",
    "SimConfig",
    "SimulationReport",
    "SingularDesign",
    "add_wald_ci",
    "compute_pseudo",
    "default_density_floor",
    "default_grid",
    "default_search_range",
    "estimate_curve",
    "eval_kernel",
    "fit_outcome_regression",
    "fit_treatment_density_beta",
    "fit_treatment_density_locscale",
    "generate_data",
    "hat_diagonal",
    "influence_values",
    "kernel_moments",
    "local_linear_fit",
    "loo_risk",
    "marginalize",
    "oracle_bandwidth",
    "oracle_risk",
    "pointwise_fit",
    "read_curve_csv",
    "run_study",
    "select_bandwidth",
    "smoothed_target",
    "smoother_row",
    "true_theta",
]
