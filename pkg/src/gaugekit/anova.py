"""Balanced gauge-study data and the one-way ANOVA decomposition."""

from __future__ import annotations

from dataclasses import dataclass, field
import math
import warnings

import numpy as np

from .errors import DataError, DegenerateDataError, DesignWarning


@dataclass(frozen=True)
class BalancedData:
    """An a x r matrix of measurements: ``a`` units each measured ``r`` times."""

    values: np.ndarray
    unit_labels: tuple = field(default=(), compare=False)

    def __post_init__(self):
        try:
            v = np.array(self.values, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise DataError(f"measurements must be numeric: {exc}") from exc
        if v.ndim != 2:
            raise DataError(f"measurements must form an a x r matrix, got shape {v.shape}")
        a, r = v.shape
        if a < 2 or r < 2:
            raise DataError(f"need a >= 2 units and r >= 2 replicates, got a={a}, r={r}")
        if not np.all(np.isfinite(v)):
            bad = np.argwhere(~np.isfinite(v))[0]
            raise DataError(f"non-finite measurement at unit {bad[0]}, replicate {bad[1]}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def a(self):
        return self.values.shape[0]

    @property
    def r(self):
        return self.values.shape[1]

    @property
    def n(self):
        return self.values.size

    def design_warnings(self):
        """Recommended-practice warnings for this design (a list of strings)."""
        out = []
        if self.a <= 2:
            out.append(f"only a={self.a} units; at least 3 randomly selected units are recommended")
        return out

    def warn_design(self):
        for msg in self.design_warnings():
            warnings.warn(msg, DesignWarning, stacklevel=2)


@dataclass(frozen=True)
class AnovaTable:
    ss_u: float
    ss_eps: float
    ss_t: float
    ms_u: float
    ms_eps: float
    df_u: int
    df_eps: int
    grand_mean: float
    unit_means: tuple
    a: int
    r: int

    def to_dict(self):
        return {
            "a": self.a,
            "r": self.r,
            "df_u": self.df_u,
            "df_eps": self.df_eps,
            "ss_u": self.ss_u,
            "ss_eps": self.ss_eps,
            "ss_t": self.ss_t,
            "ms_u": self.ms_u,
            "ms_eps": self.ms_eps,
            "grand_mean": self.grand_mean,
            "unit_means": list(self.unit_means),
        }


def anova_table(data):
    """Sums and mean squares of the one-way layout.

    Deviations are formed from the means first (two-pass), which keeps the
    sums of squares accurate when the data sit on a large offset.
    """
    if not isinstance(data, BalancedData):
        data = BalancedData(data)
    y = data.values
    a, r = data.a, data.r
    unit_means = y.mean(axis=1)
    grand = float(y.mean())
    # second pass on the residual mean removes the first-pass rounding
    grand += float((y - grand).mean())
    ss_u = r * math.fsum(((unit_means - grand) ** 2).tolist())
    ss_eps = math.fsum(((y - unit_means[:, None]) ** 2).ravel().tolist())
    ss_t = math.fsum(((y - grand) ** 2).ravel().tolist())
    df_u, df_eps = a - 1, a * (r - 1)
    return AnovaTable(
        ss_u=ss_u,
        ss_eps=ss_eps,
        ss_t=ss_t,
        ms_u=ss_u / df_u,
        ms_eps=ss_eps / df_eps,
        df_u=df_u,
        df_eps=df_eps,
        grand_mean=grand,
        unit_means=tuple(float(m) for m in unit_means),
        a=a,
        r=r,
    )


def f_statistic(table):
    """MS_u / MS_eps."""
    if table.ms_eps <= 0:
        raise DegenerateDataError(
            "MS_eps = 0: every unit's replicates are identical, repeatability variance is zero"
        )
    return table.ms_u / table.ms_eps


@dataclass(frozen=True)
class CovarianceDiagnostic:
    within: float
    within_se: float
    between: float
    between_se: float
    n_units: int

    def to_dict(self):
        return {
            "within_unit_cov": self.within,
            "within_unit_cov_se": self.within_se,
            "between_unit_cov": self.between,
            "between_unit_cov_se": self.between_se,
        }


def covariance_check(data):
    """Empirical within-unit and between-unit covariances of the measurements.

    Under the model the within-unit covariance is sigma2_u and the
    between-unit covariance is zero. Diagnostic only: standard errors come
    from the spread of per-unit (or per-pair) contributions.
    """
    if not isinstance(data, BalancedData):
        data = BalancedData(data)
    y = data.values
    a, r = data.a, data.r
    d = y - y.mean()
    row_sum = d.sum(axis=1)
    within_i = (row_sum ** 2 - (d ** 2).sum(axis=1)) / (r * (r - 1))
    within = float(within_i.mean())
    within_se = float(within_i.std(ddof=1) / math.sqrt(a))
    # neighbouring units, same replicate position
    between_i = (d[:-1] * d[1:]).mean(axis=1)
    between = float(between_i.mean())
    between_se = float(between_i.std(ddof=1) / math.sqrt(len(between_i))) if len(between_i) > 1 else math.nan
    return CovarianceDiagnostic(within, within_se, between, between_se, a)
