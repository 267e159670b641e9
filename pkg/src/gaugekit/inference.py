"""Hypothesis tests and confidence intervals for the variance components and rho."""

from __future__ import annotations

from dataclasses import dataclass, replace
import math

import numpy as np

from . import distributions as dist
from .errors import DegenerateDataError, DomainError, NotApplicableError
from .estimators import SpecLimits, VarianceEstimates

LOG_THRESHOLD = 0.01

EXACT_KINDS = ("sigma2_eps_exact", "ptr_exact", "rho_exact", "rr_exact", "snr_exact", "icc_exact")
SIGMA2_U_KINDS = ("wald", "log", "chi")


@dataclass(frozen=True)
class TestResult:
    statistic: float
    null_distribution: str
    df: tuple
    p_value: float
    hypothesis: str
    threshold: float | None = None

    __test__ = False  # not a pytest class

    def to_dict(self):
        return {
            "hypothesis": self.hypothesis,
            "statistic": self.statistic,
            "null_distribution": self.null_distribution,
            "df": list(self.df),
            "p_value": self.p_value,
            "threshold": self.threshold,
        }


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float
    kind: str
    truncated_at_zero: bool = False
    raw: bool = False

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise DomainError(f"interval bounds out of order: [{self.lower}, {self.upper}]")

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, value):
        return self.lower <= value <= self.upper

    def truncated(self):
        """The interval clipped to the non-negative half-line."""
        if self.lower >= 0:
            return replace(self, raw=False)
        return replace(self, lower=0.0, upper=max(self.upper, 0.0),
                       truncated_at_zero=True, raw=False)

    def to_dict(self):
        return {
            "kind": self.kind,
            "level": self.level,
            "lower": self.lower,
            "upper": self.upper,
            "truncated_at_zero": self.truncated_at_zero,
            "raw": self.raw,
        }


def _check_alpha(alpha):
    if not (isinstance(alpha, (int, float)) and 0 < alpha < 1):
        raise DomainError(f"alpha must lie in (0, 1), got {alpha!r}")


def _dims(table, a, r):
    return (table.a if a is None else a), (table.r if r is None else r)


# ---------------------------------------------------------------------------
# tests
# ---------------------------------------------------------------------------

def test_unit_variance(table, a=None, r=None):
    """H0: sigma2_u = 0 against sigma2_u > 0."""
    return test_rho(table, a, r, 0.0, _hypothesis="unit_variance_zero")


def test_error_variance(table, a=None, r=None, sigma0=1.0):
    """H0: sigma_eps <= sigma0 against sigma_eps > sigma0."""
    a, r = _dims(table, a, r)
    if not (isinstance(sigma0, (int, float)) and math.isfinite(sigma0) and sigma0 > 0):
        raise DomainError(f"sigma0 must be > 0, got {sigma0!r}")
    df = a * (r - 1)
    stat = table.ss_eps / (sigma0 * sigma0)
    return TestResult(stat, "chi2", (df,), dist.chi2_sf(stat, df), "error_variance_at_most", sigma0)


def test_rho(table, a=None, r=None, rho0=0.0, _hypothesis="rho_at_most"):
    """H0: rho <= rho0 against rho > rho0."""
    a, r = _dims(table, a, r)
    if not (isinstance(rho0, (int, float)) and math.isfinite(rho0) and rho0 >= 0):
        raise DomainError(f"rho0 must be a finite non-negative real, got {rho0!r}")
    if table.ms_eps <= 0:
        raise DegenerateDataError("MS_eps = 0: the F ratio is undefined")
    df = (a - 1, a * (r - 1))
    stat = (table.ms_u / table.ms_eps) / (1.0 + r * rho0)
    threshold = None if _hypothesis == "unit_variance_zero" else rho0
    return TestResult(stat, "F", df, dist.f_sf(stat, *df), _hypothesis, threshold)


# ---------------------------------------------------------------------------
# exact intervals
# ---------------------------------------------------------------------------

def ci_sigma2_eps(table, a=None, r=None, alpha=0.05):
    a, r = _dims(table, a, r)
    _check_alpha(alpha)
    df = a * (r - 1)
    lo = table.ss_eps / dist.chi2_quantile(1 - alpha / 2, df)
    hi = table.ss_eps / dist.chi2_quantile(alpha / 2, df)
    return ConfidenceInterval(lo, hi, 1 - alpha, "sigma2_eps_exact")


def ci_ptr(table, a=None, r=None, alpha=0.05, spec=None):
    if spec is None:
        raise DomainError("PTR interval needs specification limits")
    if not isinstance(spec, SpecLimits):
        spec = SpecLimits(*spec)
    s = ci_sigma2_eps(table, a, r, alpha)
    k = spec.kappa / spec.width
    return ConfidenceInterval(k * math.sqrt(s.lower), k * math.sqrt(s.upper), s.level, "ptr_exact")


def ci_rho(table, a=None, r=None, alpha=0.05):
    """Exact interval for rho from the F pivot, with raw (possibly negative) bounds.

    Call ``.truncated()`` on the result for the non-negative version.
    """
    a, r = _dims(table, a, r)
    _check_alpha(alpha)
    if table.ms_eps <= 0:
        raise DegenerateDataError("MS_eps = 0: the F ratio is undefined")
    df = (a - 1, a * (r - 1))
    ratio = table.ms_u / table.ms_eps
    lo = (ratio / dist.f_quantile(1 - alpha / 2, *df) - 1.0) / r
    hi = (ratio / dist.f_quantile(alpha / 2, *df) - 1.0) / r
    return ConfidenceInterval(lo, hi, 1 - alpha, "rho_exact", raw=lo < 0)


def ci_derived(rho_interval, target):
    """Transform a rho interval into an interval for %R&R, SNR or ICC."""
    ci = rho_interval.truncated()
    lo, hi = ci.lower, ci.upper
    if target == "rr":
        # decreasing map: bounds swap
        return ConfidenceInterval(100.0 / math.sqrt(1.0 + hi), 100.0 / math.sqrt(1.0 + lo),
                                  ci.level, "rr_exact", ci.truncated_at_zero)
    if target == "snr":
        return ConfidenceInterval(math.sqrt(lo), math.sqrt(hi), ci.level, "snr_exact",
                                  ci.truncated_at_zero)
    if target == "icc":
        return ConfidenceInterval(lo / (1.0 + lo), hi / (1.0 + hi), ci.level, "icc_exact",
                                  ci.truncated_at_zero)
    raise DomainError(f"unknown derived target {target!r}; expected rr, snr or icc")


# ---------------------------------------------------------------------------
# approximate intervals on sigma2_u
# ---------------------------------------------------------------------------

def sigma22_hat(sigma2_u, sigma2_eps, r):
    """Plug-in of the limiting variance of sqrt(a)(sigma2_u_hat - sigma2_u); vectorized."""
    return 2.0 * (sigma2_u + sigma2_eps / r) ** 2 + 2.0 * sigma2_eps ** 2 / (r * r * (r - 1))


def sigma2_u_bounds(kind, s2u, s2e, a, r, alpha, log_threshold=LOG_THRESHOLD):
    """Vectorized (lower, upper) bounds for the three sigma2_u intervals.

    Entries where the interval is not applicable (log with s2u at or below
    the threshold) are NaN. The chi interval at s2u = 0 collapses to [0, 0].
    """
    s2u = np.asarray(s2u, dtype=float)
    s2e = np.asarray(s2e, dtype=float)
    if kind == "chi":
        lo = a * s2u / dist.chi2_quantile(1 - alpha / 2, a - 1)
        hi = a * s2u / dist.chi2_quantile(alpha / 2, a - 1)
        return lo, hi
    z = dist.normal_quantile(1 - alpha / 2)
    sd = np.sqrt(sigma22_hat(s2u, s2e, r) / a)
    if kind == "wald":
        return np.maximum(0.0, s2u - z * sd), s2u + z * sd
    if kind == "log":
        ok = s2u > log_threshold
        safe = np.where(ok, s2u, 1.0)
        half = z * sd / safe
        lo = np.where(ok, np.exp(np.log(safe) - half), np.nan)
        hi = np.where(ok, np.exp(np.log(safe) + half), np.nan)
        return lo, hi
    raise DomainError(f"unknown interval kind {kind!r}; expected wald, log or chi")


def ci_sigma2_u(estimates, a, r, alpha=0.05, kind="wald", log_threshold=LOG_THRESHOLD):
    """Large-sample interval for sigma2_u built from a non-negative estimate.

    The plug-in variance uses the supplied estimates' own sigma2_u and sigma2_eps.
    """
    _check_alpha(alpha)
    if not isinstance(estimates, VarianceEstimates):
        raise DomainError("estimates must be a VarianceEstimates instance")
    s2u, s2e = estimates.sigma2_u, estimates.sigma2_eps
    if s2u < 0:
        raise DomainError("sigma2_u intervals need a non-negative estimate (use NANOVA or MLE)")
    if kind == "log" and s2u <= log_threshold:
        raise NotApplicableError(
            f"log interval is unstable for estimates near zero: sigma2_u_hat = {s2u:.6g} "
            f"<= {log_threshold}")
    if kind == "chi" and s2u <= 0:
        raise NotApplicableError("chi interval is degenerate at the boundary estimate sigma2_u_hat = 0")
    lo, hi = sigma2_u_bounds(kind, s2u, s2e, a, r, alpha, log_threshold)
    lo, hi = float(lo), float(hi)
    truncated = kind == "wald" and lo == 0.0
    return ConfidenceInterval(lo, hi, 1 - alpha, f"sigma2_u_{kind}", truncated_at_zero=truncated)
