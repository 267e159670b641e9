"""Gauge R&R analysis for the balanced one-way random-effects model."""

from __future__ import annotations

__version__ = "0.1.0"

from .anova import AnovaTable, BalancedData, anova_table, covariance_check, f_statistic
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DegenerateDataError,
    DomainError,
    GaugeError,
    MomentUndefinedError,
    NotApplicableError,
    NumericError,
    SpecificationError,
)
from .estimators import (
    AssessmentParams,
    Method,
    SpecLimits,
    VarianceEstimates,
    assessment_params,
    estimate,
    estimate_anova,
    estimate_mle,
    estimate_nanova,
    rho_plugin,
)
from .inference import (
    ConfidenceInterval,
    TestResult,
    ci_derived,
    ci_ptr,
    ci_rho,
    ci_sigma2_eps,
    ci_sigma2_u,
    test_error_variance,
    test_rho,
    test_unit_variance,
)
from .montecarlo import SimConfig, SimSummary, simulate_dataset
from .theory import AsymptoticCovariance, ModelTruth, asymptotic_covariance

__all__ = [name for name in dir() if not name.startswith("_")]
