"""Special functions and the normal, chi-square and F distributions.

Everything here is scalar and pure. The incomplete beta and gamma functions
are thin wrappers over :mod:`scipy.special`; quantiles are solved locally by
a bracketed Newton iteration so that the lower and upper tails are both
resolved to full relative precision.
"""

from __future__ import annotations

import math
from statistics import NormalDist
import warnings

from scipy import integrate, special

from .errors import (
    ConvergenceError,
    DegenerateTruncationError,
    DomainError,
    MomentUndefinedError,
)

_STD_NORMAL = NormalDist()
_SNAP = 1e-15


def _check_finite(name, value):
    if not isinstance(value, (int, float)) or not math.isfinite(value):
        raise DomainError(f"{name} must be a finite real, got {value!r}")


def _check_positive(name, value):
    _check_finite(name, value)
    if value <= 0:
        raise DomainError(f"{name} must be > 0, got {value!r}")


def _check_prob(p):
    _check_finite("p", p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {p!r}")


def clamp_probability(p):
    """Clamp ``p`` to [0, 1]; overshoot of at most 1e-15 is snapped silently."""
    if p < 0.0:
        if p < -_SNAP:
            warnings.warn(f"probability {p!r} below 0 clamped", RuntimeWarning, stacklevel=2)
        return 0.0
    if p > 1.0:
        if p > 1.0 + _SNAP:
            warnings.warn(f"probability {p!r} above 1 clamped", RuntimeWarning, stacklevel=2)
        return 1.0
    return float(p)


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------

def ln_gamma(x):
    """Natural log of the gamma function for ``x > 0``."""
    _check_positive("x", x)
    return math.lgamma(x)


def ln_beta(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def reg_inc_beta(a, b, x):
    """Regularized incomplete beta function I_x(a, b)."""
    _check_positive("a", a)
    _check_positive("b", b)
    _check_finite("x", x)
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"x must lie in [0, 1], got {x!r}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    return clamp_probability(float(special.betainc(a, b, x)))


def reg_inc_gamma_lower(s, x):
    """Regularized lower incomplete gamma function P(s, x)."""
    _check_positive("s", s)
    _check_finite("x", x)
    if x < 0:
        raise DomainError(f"x must be >= 0, got {x!r}")
    if x == 0.0:
        return 0.0
    return clamp_probability(float(special.gammainc(s, x)))


def reg_inc_gamma_upper(s, x):
    """Regularized upper incomplete gamma function Q(s, x) = 1 - P(s, x)."""
    _check_positive("s", s)
    _check_finite("x", x)
    if x < 0:
        raise DomainError(f"x must be >= 0, got {x!r}")
    if x == 0.0:
        return 1.0
    return clamp_probability(float(special.gammaincc(s, x)))


# ---------------------------------------------------------------------------
# normal
# ---------------------------------------------------------------------------

def normal_cdf(z, mean=0.0, sd=1.0):
    _check_finite("z", z)
    _check_finite("mean", mean)
    _check_positive("sd", sd)
    return clamp_probability(0.5 * math.erfc(-(z - mean) / (sd * math.sqrt(2.0))))


def normal_quantile(p, mean=0.0, sd=1.0):
    _check_prob(p)
    _check_finite("mean", mean)
    _check_positive("sd", sd)
    return mean + sd * _STD_NORMAL.inv_cdf(p)


# ---------------------------------------------------------------------------
# chi-square
# ---------------------------------------------------------------------------

def chi2_pdf(x, df):
    _check_positive("df", df)
    _check_finite("x", x)
    if x < 0:
        return 0.0
    k = 0.5 * df
    if x == 0.0:
        if k < 1:
            return math.inf
        return 0.5 if k == 1 else 0.0
    return math.exp((k - 1.0) * math.log(x) - 0.5 * x - k * math.log(2.0) - math.lgamma(k))


def chi2_cdf(x, df):
    _check_positive("df", df)
    _check_finite("x", x)
    if x < 0:
        raise DomainError(f"x must be >= 0, got {x!r}")
    return reg_inc_gamma_lower(0.5 * df, 0.5 * x)


def chi2_sf(x, df):
    _check_positive("df", df)
    _check_finite("x", x)
    if x < 0:
        raise DomainError(f"x must be >= 0, got {x!r}")
    return reg_inc_gamma_upper(0.5 * df, 0.5 * x)


def _wilson_hilferty(p, df):
    z = _STD_NORMAL.inv_cdf(p)
    h = 2.0 / (9.0 * df)
    return df * max(1.0 - h + z * math.sqrt(h), 1e-3) ** 3


def chi2_quantile(p, df):
    _check_prob(p)
    _check_positive("df", df)
    return _solve_quantile(
        p,
        cdf=lambda x: chi2_cdf(x, df),
        sf=lambda x: chi2_sf(x, df),
        pdf=lambda x: chi2_pdf(x, df),
        guess=_wilson_hilferty(p, df),
    )


# ---------------------------------------------------------------------------
# F
# ---------------------------------------------------------------------------

def f_pdf(x, df1, df2):
    _check_positive("df1", df1)
    _check_positive("df2", df2)
    _check_finite("x", x)
    if x < 0:
        return 0.0
    a, b = 0.5 * df1, 0.5 * df2
    if x == 0.0:
        if a < 1:
            return math.inf
        return 1.0 if a == 1 else 0.0
    log_pdf = (
        a * math.log(df1) + b * math.log(df2) + (a - 1.0) * math.log(x)
        - (a + b) * math.log(df2 + df1 * x) - ln_beta(a, b)
    )
    return math.exp(log_pdf)


def f_cdf(x, df1, df2):
    """F(df1, df2) distribution function via I_t(df1/2, df2/2), t = df1 x / (df1 x + df2)."""
    _check_positive("df1", df1)
    _check_positive("df2", df2)
    _check_finite("x", x)
    if x < 0:
        raise DomainError(f"x must be >= 0, got {x!r}")
    return _f_tail(x, df1, df2, upper=False)


def _f_tail(x, df1, df2, upper):
    # t and 1 - t are each formed directly; use whichever is below 1/2 so the
    # beta argument carries full relative precision
    t = df1 * x / (df1 * x + df2)
    a, b = 0.5 * df1, 0.5 * df2
    if t <= 0.5:
        if x == 0.0:
            return 1.0 if upper else 0.0
        val = special.betaincc(a, b, t) if upper else special.betainc(a, b, t)
    else:
        s = df2 / (df1 * x + df2)
        val = special.betainc(b, a, s) if upper else special.betaincc(b, a, s)
    return clamp_probability(float(val))


def f_sf(x, df1, df2):
    """Upper tail 1 - f_cdf, evaluated without cancellation."""
    _check_positive("df1", df1)
    _check_positive("df2", df2)
    _check_finite("x", x)
    if x < 0:
        raise DomainError(f"x must be >= 0, got {x!r}")
    return _f_tail(x, df1, df2, upper=True)


def _paulson(p, df1, df2):
    # normal approximation to the cube root of F
    z = _STD_NORMAL.inv_cdf(p)
    a, b = 2.0 / (9.0 * df1), 2.0 / (9.0 * df2)
    denom = (1.0 - b) ** 2 - z * z * b
    if denom <= 0:
        return 1.0
    num = (1.0 - a) * (1.0 - b) + z * math.sqrt(max((1.0 - a) ** 2 * b + a * denom, 0.0))
    return max(num / denom, 1e-3) ** 3


def f_quantile(p, df1, df2):
    _check_prob(p)
    _check_positive("df1", df1)
    _check_positive("df2", df2)
    return _solve_quantile(
        p,
        cdf=lambda x: f_cdf(x, df1, df2),
        sf=lambda x: f_sf(x, df1, df2),
        pdf=lambda x: f_pdf(x, df1, df2),
        guess=_paulson(p, df1, df2),
    )


def _solve_quantile(p, cdf, sf, pdf, guess, max_iter=400):
    """Invert a continuous distribution on (0, inf).

    Newton steps are taken inside a maintained bracket and replaced by
    bisection whenever they leave it. For p > 1/2 the equation is solved on
    the survival function so that upper-tail quantiles keep their precision.
    """
    upper = p > 0.5
    target = 1.0 - p if upper else p

    def resid(x):
        # increasing in x in both branches
        return target - sf(x) if upper else cdf(x) - target

    lo, hi = 0.0, max(guess, 1e-300)
    while resid(hi) < 0:
        lo = hi
        hi *= 2.0
        if hi > 1e300:
            raise ConvergenceError("quantile bracket expansion overflowed", {"p": p})
    x = guess if lo < guess < hi else 0.5 * (lo + hi)
    if x <= 0:
        x = 0.5 * hi
    for _ in range(max_iter):
        f = resid(x)
        if f == 0.0:
            return x
        if f < 0:
            lo = x
        else:
            hi = x
        d = pdf(x)
        step_ok = False
        if d > 0 and math.isfinite(d):
            x_new = x - f / d
            step_ok = lo < x_new < hi
        if not step_ok:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= 1e-15 * abs(x_new) or hi - lo <= 4e-16 * hi:
            return x_new
        # relative p-space convergence
        if abs(f) <= 1e-13 * target and abs(x_new - x) <= 1e-12 * abs(x_new):
            return x_new
        x = x_new
    raise ConvergenceError("quantile iteration did not converge", {"p": p, "x": x, "bracket": (lo, hi)})


# ---------------------------------------------------------------------------
# truncated F moments
# ---------------------------------------------------------------------------

def f_trunc_moment(k, df1, df2, c):
    """E[F^k | F >= c] for F ~ F(df1, df2), by adaptive quadrature.

    Integrates over t = df1 x / (df1 x + df2), under which F follows a
    Beta(df1/2, df2/2) law and F^k = (df2/df1)^k t^k (1-t)^-k. The endpoint
    singularity at t = 1 (present when df2/2 - k - 1 < 0) is handled by an
    algebraic quadrature weight.
    """
    if isinstance(k, bool) or not isinstance(k, int) or k < 1:
        raise DomainError(f"k must be a positive integer, got {k!r}")
    _check_positive("df1", df1)
    _check_positive("df2", df2)
    _check_finite("c", c)
    if c < 0:
        raise DomainError(f"c must be >= 0, got {c!r}")
    if df2 <= 2 * k:
        raise MomentUndefinedError(f"E[F^{k}] requires df2 > {2 * k}, got df2={df2}")

    a, b = 0.5 * df1, 0.5 * df2
    t_lo = df1 * c / (df1 * c + df2)
    tail = f_sf(c, df1, df2) if c > 0 else 1.0
    if tail < 1e-300:
        raise DegenerateTruncationError(f"Pr(F >= {c}) = {tail:.3g} leaves no mass")

    p_exp = a + k - 1.0       # exponent of t
    q_exp = b - k - 1.0       # exponent of (1 - t)
    log_norm = k * math.log(df2 / df1) - ln_beta(a, b)

    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            if q_exp < 0:
                val, err = integrate.quad(
                    lambda t: math.exp(p_exp * math.log(t) + log_norm),
                    t_lo, 1.0, weight="alg", wvar=(0.0, q_exp),
                    epsabs=0.0, epsrel=1e-12, limit=200,
                )
            else:
                def integrand(t):
                    if t <= 0.0 or t >= 1.0:
                        return 0.0
                    return math.exp(p_exp * math.log(t) + q_exp * math.log1p(-t) + log_norm)

                mode = p_exp / (p_exp + q_exp) if p_exp + q_exp > 0 else 0.5
                pts = [m for m in (mode,) if t_lo < m < 1.0]
                val, err = integrate.quad(
                    integrand, t_lo, 1.0, points=pts or None,
                    epsabs=0.0, epsrel=1e-12, limit=400,
                )
        except integrate.IntegrationWarning as exc:
            raise ConvergenceError(
                "truncated F moment quadrature did not converge",
                {"k": k, "df1": df1, "df2": df2, "c": c, "reason": str(exc)},
            ) from exc
    if val > 0 and err > 1e-9 * val:
        raise ConvergenceError(
            "truncated F moment quadrature error above tolerance",
            {"k": k, "df1": df1, "df2": df2, "c": c, "estimate": val, "abserr": err},
        )
    return val / tail


def f_mean(df1, df2):
    if df2 <= 2:
        raise MomentUndefinedError(f"E[F] requires df2 > 2, got {df2}")
    return df2 / (df2 - 2.0)


def f_variance(df1, df2):
    if df2 <= 4:
        raise MomentUndefinedError(f"Var[F] requires df2 > 4, got {df2}")
    return 2.0 * df2 ** 2 * (df2 + df1 - 2.0) / (df1 * (df2 - 2.0) ** 2 * (df2 - 4.0))
