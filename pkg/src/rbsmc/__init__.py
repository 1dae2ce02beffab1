"""Rao-Blackwellized particle filtering and smoothing for regime-switching
conditionally linear Gaussian state-space models, with an exact enumeration
oracle, a two-factor commodity futures model, and an EM calibration loop."""

from .commodity import (
    FuturesPanel,
    TwoFactorParams,
    build_clgm,
    default_start_params,
    discretize_sde,
    ingest_futures_csv,
    simulate_panel,
    term_structure,
)
from .em import EmConfig, EmResult, e_step, em_run, expected_complete_loglik
from .ffbs import FfbsResult, SmoothingMarginals, smooth_ffbs
from .forward import filter_regime_marginals, forward_pass
from .harness import (
    BenchmarkConfig,
    BenchmarkResult,
    load_model_config,
    run_benchmark,
    run_filter,
    run_smoother,
)
from .model import (
    GaussianQuadForm,
    ModelValidationError,
    NumericalError,
    RegimeModel,
    WeightedNormal,
    gaussian_logpdf,
    mahalanobis_sq,
    observation_logdensity,
    quadform_from_weighted_normal,
    quadform_integral,
    quadform_moments,
    quadform_product,
    simulate,
    transition_logdensity,
)
from .oracle import InstanceTooLargeError, OracleResult, enumerate_posterior, rts_given_regimes
from .twofilter import TwoFilterResult, smooth_two_filter

__all__ = [
    "BenchmarkConfig",
    "BenchmarkResult",
    "EmConfig",
    "EmResult",
    "FfbsResult",
    "FuturesPanel",
    "GaussianQuadForm",
    "InstanceTooLargeError",
    "ModelValidationError",
    "NumericalError",
    "OracleResult",
    "RegimeModel",
    "SmoothingMarginals",
    "TwoFactorParams",
    "TwoFilterResult",
    "WeightedNormal",
    "build_clgm",
    "default_start_params",
    "discretize_sde",
    "e_step",
    "em_run",
    "enumerate_posterior",
    "expected_complete_loglik",
    "filter_regime_marginals",
    "forward_pass",
    "gaussian_logpdf",
    "ingest_futures_csv",
    "load_model_config",
    "mahalanobis_sq",
    "observation_logdensity",
    "quadform_from_weighted_normal",
    "quadform_integral",
    "quadform_moments",
    "quadform_product",
    "rts_given_regimes",
    "run_benchmark",
    "run_filter",
    "run_smoother",
    "simulate",
    "simulate_panel",
    "smooth_ffbs",
    "smooth_two_filter",
    "term_structure",
    "transition_logdensity",
]

__version__ = "0.1.0"
