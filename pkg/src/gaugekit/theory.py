"""Finite-sample and asymptotic properties of the variance-component estimators.

Probabilities and rho moments are one-dimensional in the F ratio; moments of
the truncated variance-component estimators are integrals over the joint law
of the two independent chi-square sums of squares.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from typing import NamedTuple
import warnings

import numpy as np
from scipy import integrate, special

from . import distributions as dist
from .errors import (
    ConvergenceError,
    DegenerateTruncationError,
    DomainError,
    MomentUndefinedError,
)
from .estimators import Method, beta_factor


@dataclass(frozen=True)
class ModelTruth:
    a: int
    r: int
    sigma2_u: float
    sigma2_eps: float = 1.0
    mu: float = 0.0

    def __post_init__(self):
        if int(self.a) != self.a or self.a < 2:
            raise DomainError(f"a must be an integer >= 2, got {self.a!r}")
        if int(self.r) != self.r or self.r < 2:
            raise DomainError(f"r must be an integer >= 2, got {self.r!r}")
        if not (math.isfinite(self.sigma2_u) and self.sigma2_u >= 0):
            raise DomainError(f"sigma2_u must be >= 0, got {self.sigma2_u!r}")
        if not (math.isfinite(self.sigma2_eps) and self.sigma2_eps > 0):
            raise DomainError(f"sigma2_eps must be > 0, got {self.sigma2_eps!r}")

    @classmethod
    def from_rho(cls, a, r, rho, sigma2_eps=1.0):
        return cls(a, r, rho * sigma2_eps, sigma2_eps)

    @property
    def rho(self):
        return self.sigma2_u / self.sigma2_eps

    @property
    def sigma2_t(self):
        return self.sigma2_u + self.sigma2_eps

    @property
    def df_u(self):
        return self.a - 1

    @property
    def df_eps(self):
        return self.a * (self.r - 1)

    @property
    def expected_ms_u(self):
        return self.sigma2_eps + self.r * self.sigma2_u


# ---------------------------------------------------------------------------
# boundary probabilities
# ---------------------------------------------------------------------------

def prob_negative_anova(truth):
    """Pr(MS_u < MS_eps) = Pr(F < 1/(1 + r rho))."""
    return dist.f_cdf(1.0 / (1.0 + truth.r * truth.rho), truth.df_u, truth.df_eps)


def prob_boundary(truth, method=Method.MLE):
    """Probability that the NANOVA or MLE estimate of sigma2_u is 0."""
    method = Method.parse(method)
    if method is Method.ANOVA:
        raise DomainError("the ANOVA estimator has no boundary; use prob_negative_anova")
    beta = beta_factor(truth.a, method)
    return dist.f_cdf(beta / (1.0 + truth.r * truth.rho), truth.df_u, truth.df_eps)


# ---------------------------------------------------------------------------
# rho: ANOVA (exact)
# ---------------------------------------------------------------------------

def mean_rho_anova(truth):
    df_e = truth.df_eps
    if df_e <= 2:
        raise MomentUndefinedError(f"E[rho_ANOVA] needs df_eps > 2, got {df_e}")
    return (truth.rho * df_e + 2.0 / truth.r) / (df_e - 2.0)


def bias_rho_anova(truth):
    df_e = truth.df_eps
    if df_e <= 2:
        raise MomentUndefinedError(f"bias of rho_ANOVA needs df_eps > 2, got {df_e}")
    return 2.0 * (1.0 + truth.r * truth.rho) / (truth.r * (df_e - 2.0))


def var_rho_anova(truth):
    df_u, df_e, r = truth.df_u, truth.df_eps, truth.r
    if df_e <= 4:
        raise MomentUndefinedError(f"Var[rho_ANOVA] needs df_eps > 4, got {df_e}")
    g = 1.0 + r * truth.rho
    return (2.0 * g * g * df_e ** 2 * (df_e + df_u - 2.0)
            / (r * r * df_u * (df_e - 2.0) ** 2 * (df_e - 4.0)))


# ---------------------------------------------------------------------------
# rho: truncated estimators (NANOVA, MLE)
# ---------------------------------------------------------------------------

def _truncated_rho_moments(truth, method, order):
    method = Method.parse(method)
    if method is Method.ANOVA:
        raise DomainError("use the exact ANOVA formulas for an untruncated estimator")
    need = 2 * order
    if truth.df_eps <= need:
        raise MomentUndefinedError(
            f"moment of order {order} needs df_eps > {need}, got {truth.df_eps}")
    r = truth.r
    beta = beta_factor(truth.a, method)
    g = 1.0 + r * truth.rho
    c = beta / g
    tail = dist.f_sf(c, truth.df_u, truth.df_eps)
    s = g / beta
    try:
        m1 = dist.f_trunc_moment(1, truth.df_u, truth.df_eps, c)
        m2 = dist.f_trunc_moment(2, truth.df_u, truth.df_eps, c) if order >= 2 else None
    except DegenerateTruncationError:
        return 0.0, 0.0
    e1 = tail * (s * m1 - 1.0) / r
    if order == 1:
        return e1, None
    # (sF - 1)^2 expanded about the conditional mean to limit cancellation
    cond_var = max(m2 - m1 * m1, 0.0)
    e2 = tail * (s * s * cond_var + (s * m1 - 1.0) ** 2) / (r * r)
    return e1, e2


def mean_rho_truncated(truth, method=Method.MLE):
    """E[rho_hat] for the NANOVA (beta = 1) or MLE (beta = a/(a-1)) estimator."""
    return _truncated_rho_moments(truth, method, 1)[0]


def var_rho_truncated(truth, method=Method.MLE):
    e1, e2 = _truncated_rho_moments(truth, method, 2)
    return max(e2 - e1 * e1, 0.0)


def mean_rho(truth, method):
    method = Method.parse(method)
    if method is Method.ANOVA:
        return mean_rho_anova(truth)
    return mean_rho_truncated(truth, method)


def var_rho(truth, method):
    method = Method.parse(method)
    if method is Method.ANOVA:
        return var_rho_anova(truth)
    return var_rho_truncated(truth, method)


class RelativeValue(NamedTuple):
    value: float
    relative: bool   # False: rho == 0, value is absolute


def relative_bias(truth, method):
    """Percentage relative bias 100 (E[rho_hat]/rho - 1); absolute bias when rho == 0."""
    m = mean_rho(truth, method)
    if truth.rho == 0:
        return RelativeValue(m, False)
    return RelativeValue(100.0 * (m / truth.rho - 1.0), True)


def relative_se(truth, method):
    """Percentage relative standard error 100 sd(rho_hat)/rho; absolute sd when rho == 0."""
    sd = math.sqrt(var_rho(truth, method))
    if truth.rho == 0:
        return RelativeValue(sd, False)
    return RelativeValue(100.0 * sd / truth.rho, True)


# ---------------------------------------------------------------------------
# variance components
# ---------------------------------------------------------------------------

def var_vc_anova(truth):
    """(Var[sigma2_u_hat], Var[sigma2_eps_hat]) for the ANOVA estimators."""
    a, r = truth.a, truth.r
    s2e = truth.sigma2_eps
    lam = s2e + r * truth.sigma2_u
    var_u = (2.0 / r ** 2) * (lam ** 2 / (a - 1) + s2e ** 2 / (a * (r - 1)))
    var_e = 2.0 * s2e ** 2 / (a * (r - 1))
    return var_u, var_e


@dataclass(frozen=True)
class VCMoments:
    mean_u: float
    mean_eps: float
    var_u: float
    var_eps: float
    p_boundary: float
    route: str = "quadrature"
    mc_se: tuple | None = None

    def as_tuple(self):
        return self.mean_u, self.mean_eps, self.var_u, self.var_eps


def _chi2_raw_moment(df, i):
    out = 1.0
    for k in range(i):
        out *= df + 2 * k
    return out


def _region_moments(df_u, df_e, kappa, epsrel=1e-11):
    """E[X^i Y^j 1{X >= kappa Y}] and E[X^i Y^j 1{X < kappa Y}] for i + j <= 2.

    X ~ chi2(df_u), Y ~ chi2(df_e) independent. The integral over the wedge
    is iterated: the inner integral over x is the regularized incomplete
    gamma function, the outer integral over y is adaptive quadrature.
    """
    pairs = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    upper, lower = {}, {}
    for i, j in pairs:
        m = _chi2_raw_moment(df_u, i) * _chi2_raw_moment(df_e, j)
        if kappa == 0.0:
            upper[i, j], lower[i, j] = m, 0.0
            continue
        ku, ke = 0.5 * (df_u + 2 * i), 0.5 * (df_e + 2 * j)
        log_norm = -ke * math.log(2.0) - math.lgamma(ke)

        def density(y):
            # chi2(df_e + 2j) density in y
            return math.exp((ke - 1.0) * math.log(y) - 0.5 * y + log_norm) if y > 0 else 0.0

        mode = max(2.0 * (ke - 1.0), 0.0)
        sd = math.sqrt(4.0 * ke)
        hi = mode + 60.0 * sd + 200.0
        pts = [p for p in (mode, mode + 5 * sd, max(mode - 5 * sd, 0.0)) if 0.0 < p < hi]
        vals = []
        for fn in (special.gammaincc, special.gammainc):
            with warnings.catch_warnings():
                warnings.simplefilter("error", integrate.IntegrationWarning)
                try:
                    v, err = integrate.quad(
                        lambda y, fn=fn: density(y) * float(fn(ku, 0.5 * kappa * y)),
                        0.0, hi, points=sorted(set(pts)) or None,
                        epsabs=0.0, epsrel=epsrel, limit=500,
                    )
                except integrate.IntegrationWarning as exc:
                    raise ConvergenceError(
                        "region-moment quadrature did not converge",
                        {"df_u": df_u, "df_eps": df_e, "kappa": kappa, "i": i, "j": j,
                         "reason": str(exc)},
                    ) from exc
            if v > 0 and err > 1e-8 * v:
                raise ConvergenceError(
                    "region-moment quadrature error above tolerance",
                    {"df_u": df_u, "df_eps": df_e, "kappa": kappa, "i": i, "j": j,
                     "estimate": v, "abserr": err},
                )
            vals.append(v)
        upper[i, j], lower[i, j] = m * vals[0], m * vals[1]
    return upper, lower


def _estimator_constants(truth, method):
    """(scale on MS_u, cutoff kappa, boundary divisor of SS_t) for a method."""
    method = Method.parse(method)
    a, r = truth.a, truth.r
    if method is Method.ANOVA:
        return 1.0, 0.0, None
    beta = beta_factor(a, method)
    kappa = beta * truth.sigma2_eps * truth.df_u / (truth.expected_ms_u * truth.df_eps)
    divisor = a * r if method is Method.MLE else a * r - 1
    return beta, kappa, divisor


def _assemble(truth, beta, divisor, upper, lower):
    r = truth.r
    lam, s2e = truth.expected_ms_u, truth.sigma2_eps
    c1 = lam / (beta * truth.df_u)     # MS_u / beta per unit of X
    c2 = s2e / truth.df_eps            # MS_eps per unit of Y
    eu = (c1 * upper[1, 0] - c2 * upper[0, 1]) / r
    eu2 = (c1 * c1 * upper[2, 0] - 2 * c1 * c2 * upper[1, 1] + c2 * c2 * upper[0, 2]) / (r * r)
    ee = c2 * upper[0, 1]
    ee2 = c2 * c2 * upper[0, 2]
    if divisor is not None:
        ee += (lam * lower[1, 0] + s2e * lower[0, 1]) / divisor
        ee2 += (lam * lam * lower[2, 0] + 2 * lam * s2e * lower[1, 1]
                + s2e * s2e * lower[0, 2]) / divisor ** 2
    return eu, ee, max(eu2 - eu * eu, 0.0), max(ee2 - ee * ee, 0.0), lower[0, 0]


def moments_vc_truncated(truth, method=Method.MLE, fallback="montecarlo",
                         mc_draws=10_000_000, seed=0x5EED):
    """(E[s2u], E[s2e], Var[s2u], Var[s2e]) of a variance-component estimator.

    With ``method=ANOVA`` the region is the whole plane and the exact
    unbiased moments are recovered. If quadrature fails and ``fallback`` is
    ``"montecarlo"``, the moments are estimated from ``mc_draws`` simulated
    sums of squares and the result carries Monte Carlo standard errors.
    """
    beta, kappa, divisor = _estimator_constants(truth, method)
    try:
        upper, lower = _region_moments(truth.df_u, truth.df_eps, kappa)
    except ConvergenceError:
        if fallback != "montecarlo":
            raise
        warnings.warn("quadrature failed; falling back to Monte Carlo", RuntimeWarning, stacklevel=2)
        return _moments_vc_montecarlo(truth, method, mc_draws, seed)
    eu, ee, vu, ve, p0 = _assemble(truth, beta, divisor, upper, lower)
    return VCMoments(eu, ee, vu, ve, p0)


def _moments_vc_montecarlo(truth, method, n, seed):
    from . import rng  # local: keeps the theory layer free of sampling at import

    beta, kappa, divisor = _estimator_constants(truth, method)
    r = truth.r
    lam, s2e = truth.expected_ms_u, truth.sigma2_eps
    sums = np.zeros(5)
    sq = np.zeros(4)
    chunk = 1 << 18
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n), dtype=np.uint64)
        x = rng.chi_squares(rng.stream_keys(seed, idx, rng.TAG_GAMMA_U), truth.df_u)
        y = rng.chi_squares(rng.stream_keys(seed, idx, rng.TAG_GAMMA_E), truth.df_eps)
        ms_u, ms_e = lam * x / truth.df_u, s2e * y / truth.df_eps
        inside = ms_u >= beta * ms_e if kappa > 0 else np.ones_like(x, dtype=bool)
        su = np.where(inside, (ms_u / beta - ms_e) / r, 0.0)
        se = ms_e.copy()
        if divisor is not None:
            se = np.where(inside, ms_e, (lam * x + s2e * y) / divisor)
        sums += [su.sum(), se.sum(), (su * su).sum(), (se * se).sum(), (~inside).sum()]
        sq += [(su * su).sum(), (se * se).sum(), (su ** 4).sum(), (se ** 4).sum()]
    eu, ee = sums[0] / n, sums[1] / n
    vu, ve = sums[2] / n - eu * eu, sums[3] / n - ee * ee
    se_mean = (math.sqrt(vu / n), math.sqrt(ve / n))
    return VCMoments(eu, ee, vu, ve, sums[4] / n, route="montecarlo", mc_se=se_mean)


# ---------------------------------------------------------------------------
# asymptotics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AsymptoticCovariance:
    sigma11: float
    sigma12: float
    sigma22: float
    sigma2_rho: float | None

    def to_dict(self):
        return {"sigma11": self.sigma11, "sigma12": self.sigma12,
                "sigma22": self.sigma22, "sigma2_rho": self.sigma2_rho}


def asymptotic_covariance(sigma2_u, sigma2_eps, r):
    """Limiting covariance of sqrt(a) (s2e_hat - s2e, s2u_hat - s2u) as a -> inf.

    ``sigma2_rho`` (the limiting variance of sqrt(a)(rho_hat - rho)) is only
    reported for sigma2_u > 0.
    """
    if int(r) != r or r < 2:
        raise DomainError(f"r must be an integer >= 2, got {r!r}")
    if not sigma2_eps > 0:
        raise DomainError(f"sigma2_eps must be > 0, got {sigma2_eps!r}")
    e2 = sigma2_eps * sigma2_eps
    s11 = 2.0 * e2 / (r - 1)
    s12 = -2.0 * e2 / (r * (r - 1))
    s22 = 2.0 * (sigma2_u + sigma2_eps / r) ** 2 + 2.0 * e2 / (r * r * (r - 1))
    s_rho = None
    if sigma2_u > 0:
        rho = sigma2_u / sigma2_eps
        s_rho = (2.0 / r ** 2) * ((1.0 + r * rho) ** 2 + 1.0 / (r - 1))
    return AsymptoticCovariance(s11, s12, s22, s_rho)


def sigma2_rho(rho, r):
    """Reference limiting variance of sqrt(a)(rho_hat - rho); see sigma2_rho_delta."""
    return (2.0 / r ** 2) * ((1.0 + r * rho) ** 2 + 1.0 / (r - 1))


def sigma2_rho_delta(rho, r):
    """Limiting variance of sqrt(a)(rho_hat - rho) by the delta method.

    Propagates the full (sigma11, sigma12, sigma22) covariance through
    rho = sigma2_u / sigma2_eps, which gives 2 (1 + r rho)^2 / (r (r - 1)).
    It exceeds ``sigma2_rho`` for every r >= 2 and agrees with it as r -> inf.
    """
    if int(r) != r or r < 2:
        raise DomainError(f"r must be an integer >= 2, got {r!r}")
    return 2.0 * (1.0 + r * rho) ** 2 / (r * (r - 1))


# ---------------------------------------------------------------------------
# figure grids
# ---------------------------------------------------------------------------

DESIGN_PLANS = tuple((a, r) for a in (5, 10, 20, 30) for r in (2, 3, 6))
N60_PLANS = ((6, 10), (10, 6), (20, 3), (30, 2))
N96_PLANS = ((6, 16), (8, 12), (12, 8), (24, 4), (32, 3), (48, 2))
N96_SCENARIOS = ((0.5, 1.0), (0.5, 0.5), (0.5, 0.1))


def rho_grid(lo=1.0, hi=100.0, points=50):
    """Log-spaced grid of rho values."""
    if points < 1 or not 0 < lo <= hi:
        raise DomainError(f"invalid rho grid ({lo}, {hi}, {points})")
    if points == 1:
        return [float(lo)]
    return [float(v) for v in np.geomspace(lo, hi, points)]


QUANTITIES = ("negprob", "bias", "se", "boundary", "asymcov")


def theory_rows(plans, rhos, quantity, sigma2_eps=1.0):
    """Long-format rows ``(a, r, rho, quantity, method, value, status)``."""
    if quantity not in QUANTITIES:
        raise DomainError(f"unknown quantity {quantity!r}; expected one of {QUANTITIES}")
    rows = []
    for a, r in plans:
        for rho in rhos:
            truth = ModelTruth.from_rho(a, r, rho, sigma2_eps)
            for name, method, fn in _quantity_functions(quantity):
                try:
                    value = fn(truth)
                    status = "ok"
                except MomentUndefinedError:
                    value, status = None, "NA:moment_undefined"
                except ConvergenceError:
                    value, status = None, "NA:no_convergence"
                rows.append((a, r, rho, name, method, value, status))
    return rows


def _quantity_functions(quantity):
    if quantity == "negprob":
        return [("negprob", "anova", prob_negative_anova)]
    if quantity == "boundary":
        return [("boundary", m.value, lambda t, m=m: prob_boundary(t, m))
                for m in (Method.NANOVA, Method.MLE)]
    if quantity == "bias":
        return [("relative_bias_pct", m.value, lambda t, m=m: relative_bias(t, m).value)
                for m in Method]
    if quantity == "se":
        return [("relative_se_pct", m.value, lambda t, m=m: relative_se(t, m).value)
                for m in Method]
    return [
        ("sigma11", "mle", lambda t: asymptotic_covariance(t.sigma2_u, t.sigma2_eps, t.r).sigma11),
        ("sigma12", "mle", lambda t: asymptotic_covariance(t.sigma2_u, t.sigma2_eps, t.r).sigma12),
        ("sigma22", "mle", lambda t: asymptotic_covariance(t.sigma2_u, t.sigma2_eps, t.r).sigma22),
        ("sigma2_rho", "mle", lambda t: asymptotic_covariance(t.sigma2_u, t.sigma2_eps, t.r).sigma2_rho),
    ]
