from __future__ import annotations

import math
import warnings

import mpmath as mp
import numpy as np
import pytest
from scipy import integrate

from gaugekit import distributions as dist
from gaugekit import rng, theory
from gaugekit.errors import ConvergenceError, DomainError, MomentUndefinedError
from gaugekit.theory import ModelTruth

mp.mp.dps = 30


def chi_pair(seed, n, df_u, df_e, start=0):
    idx = np.arange(start, start + n, dtype=np.uint64)
    x = rng.chi_squares(rng.stream_keys(seed, idx, rng.TAG_GAMMA_U), df_u)
    y = rng.chi_squares(rng.stream_keys(seed, idx, rng.TAG_GAMMA_E), df_e)
    return x, y


def mc_draws(seed, n, df_u, df_e, chunk=1_000_000):
    for start in range(0, n, chunk):
        yield chi_pair(seed, min(chunk, n - start), df_u, df_e, start)


# --- model and probabilities ------------------------------------------------

def test_model_truth():
    t = ModelTruth.from_rho(10, 3, 2.0, sigma2_eps=0.5)
    assert t.sigma2_u == 1.0 and t.sigma2_t == 1.5
    assert abs(t.rho - 2.0) <= 1e-12 * 2.0
    for bad in ((1, 3, 1.0), (5, 1, 1.0), (5, 3, -1.0)):
        with pytest.raises(DomainError):
            ModelTruth(*bad)
    with pytest.raises(DomainError):
        ModelTruth(5, 3, 1.0, 0.0)


def test_prob_negative_at_rho_zero():
    t = ModelTruth(5, 2, 0.0)
    val, _ = integrate.quad(lambda x: dist.f_pdf(x, 4, 5), 0, 1, epsabs=0, epsrel=1e-12)
    assert theory.prob_negative_anova(t) == pytest.approx(val, abs=1e-12)


def test_prob_negative_limit():
    assert theory.prob_negative_anova(ModelTruth.from_rho(5, 2, 1e6)) < 1e-6


def test_prob_negative_decreases_with_measurements():
    for rho in (1.0, 5.0, 30.0):
        for r in (2, 3, 6):
            vals = [theory.prob_negative_anova(ModelTruth.from_rho(a, r, rho)) for a in (5, 10, 20, 30)]
            assert all(x > y for x, y in zip(vals, vals[1:]))
        for a in (5, 10, 20, 30):
            vals = [theory.prob_negative_anova(ModelTruth.from_rho(a, r, rho)) for r in (2, 3, 6)]
            assert all(x > y for x, y in zip(vals, vals[1:]))


def test_boundary_probabilities():
    for a, r in theory.DESIGN_PLANS:
        for rho in (0.0, 0.5, 3.0, 40.0):
            t = ModelTruth.from_rho(a, r, rho)
            assert theory.prob_boundary(t, "nanova") == theory.prob_negative_anova(t)
            assert theory.prob_boundary(t, "mle") >= theory.prob_boundary(t, "nanova")
    with pytest.raises(DomainError):
        theory.prob_boundary(ModelTruth(5, 2, 1.0), "anova")
    grid = [theory.prob_boundary(ModelTruth.from_rho(10, 3, rho), "mle") for rho in theory.rho_grid(0.1, 100, 40)]
    assert all(x >= y for x, y in zip(grid, grid[1:]))


def test_boundary_probability_monte_carlo():
    t = ModelTruth.from_rho(10, 3, 2.0)
    beta = 10 / 9
    n = 1_000_000
    x, y = chi_pair(101, n, 9, 20)
    f = (1 + 3 * 2.0) * (x / 9) / (y / 20)
    p = theory.prob_boundary(t, "mle")
    assert abs((f < beta).mean() - p) < 3 * math.sqrt(p * (1 - p) / n)


# --- rho moments ------------------------------------------------------------

def test_anova_rho_moments_direct():
    t = ModelTruth.from_rho(10, 3, 2.0)
    assert theory.mean_rho_anova(t) == pytest.approx(40.666666666666667 / 18, rel=1e-14)
    assert theory.bias_rho_anova(t) == pytest.approx(14 / 54, rel=1e-14)
    assert theory.var_rho_anova(t) == pytest.approx(1_058_400 / 419_904, rel=1e-14)
    assert theory.relative_bias(t, "anova").value == pytest.approx(12.962962962962, rel=1e-10)


def test_bias_identity_and_sign():
    for a, r in theory.DESIGN_PLANS:
        for rho in theory.rho_grid(1, 100, 20):
            t = ModelTruth.from_rho(a, r, rho)
            b = theory.bias_rho_anova(t)
            assert b > 0
            assert theory.mean_rho_anova(t) - rho == pytest.approx(b, rel=1e-10, abs=1e-14)


def test_variance_via_f_moments():
    for a, r, rho in ((10, 3, 2.0), (5, 6, 0.7), (30, 2, 15.0)):
        t = ModelTruth.from_rho(a, r, rho)
        m1 = dist.f_trunc_moment(1, t.df_u, t.df_eps, 0.0)
        m2 = dist.f_trunc_moment(2, t.df_u, t.df_eps, 0.0)
        g = (1 + r * rho) / r
        assert theory.var_rho_anova(t) == pytest.approx(g * g * (m2 - m1 * m1), rel=1e-8)
        # the truncated formula with no truncation reduces to the ANOVA mean
        assert (g * r * m1 - 1) / r == pytest.approx(theory.mean_rho_anova(t), rel=1e-9)


def test_moment_existence():
    with pytest.raises(MomentUndefinedError):
        theory.mean_rho_anova(ModelTruth(2, 2, 1.0))
    with pytest.raises(MomentUndefinedError):
        theory.var_rho_anova(ModelTruth(4, 2, 1.0))
    with pytest.raises(MomentUndefinedError):
        theory.var_rho_truncated(ModelTruth(4, 2, 1.0), "mle")
    assert theory.var_rho_anova(ModelTruth(5, 2, 1.0)) > 0


def test_bias_vanishes_with_units():
    vals = [theory.bias_rho_anova(ModelTruth.from_rho(a, 3, 2.0)) for a in (10, 100, 1000, 10000)]
    assert vals[-1] < 1e-3 and all(x > y for x, y in zip(vals, vals[1:]))


def _truncated_rho_oracle(t, beta):
    # E[rho_hat^k] from the closed-form truncated F moments
    a_, b_ = mp.mpf(t.df_u) / 2, mp.mpf(t.df_eps) / 2
    g = 1 + t.r * mp.mpf(t.rho)
    c = beta / g
    tc = t.df_u * c / (t.df_u * c + t.df_eps)

    def tail_moment(k):  # E[F^k 1{F >= c}]
        return ((mp.mpf(t.df_eps) / t.df_u) ** k * mp.beta(a_ + k, b_ - k) / mp.beta(a_, b_)
                * mp.betainc(b_ - k, a_ + k, 0, 1 - tc, regularized=True))

    tail = mp.betainc(b_, a_, 0, 1 - tc, regularized=True)
    s = g / beta
    e1 = (s * tail_moment(1) - tail) / t.r
    e2 = (s * s * tail_moment(2) - 2 * s * tail_moment(1) + tail) / t.r ** 2
    return float(e1), float(e2 - e1 * e1)


@pytest.mark.parametrize("a,r,rho", [(5, 2, 1.0), (10, 3, 2.0), (20, 3, 4.0), (30, 6, 0.2), (5, 6, 50.0)])
@pytest.mark.parametrize("method", ["mle", "nanova"])
def test_truncated_rho_matches_closed_form(a, r, rho, method):
    t = ModelTruth.from_rho(a, r, rho)
    beta = a / (a - 1) if method == "mle" else 1.0
    mean, var = _truncated_rho_oracle(t, beta)
    assert theory.mean_rho_truncated(t, method) == pytest.approx(mean, rel=1e-8)
    assert theory.var_rho_truncated(t, method) == pytest.approx(var, rel=1e-7)


def test_mle_r3_nearly_unbiased():
    for a in (5, 10, 20, 30):
        for rho in theory.rho_grid(1, 10, 10):
            rb = theory.relative_bias(ModelTruth.from_rho(a, 3, rho), "mle")
            assert rb.relative and abs(rb.value) < 2.0


def test_nanova_approaches_anova():
    t = ModelTruth.from_rho(10, 3, 200.0)
    assert theory.mean_rho_truncated(t, "nanova") == pytest.approx(theory.mean_rho_anova(t), rel=1e-12)


def test_relative_helpers_at_zero():
    t = ModelTruth(10, 3, 0.0)
    rb = theory.relative_bias(t, "mle")
    assert not rb.relative and rb.value > 0
    rs = theory.relative_se(t, "anova")
    assert not rs.relative and rs.value == pytest.approx(math.sqrt(theory.var_rho_anova(t)))


def test_truncated_rho_monte_carlo():
    t = ModelTruth.from_rho(20, 3, 4.0)
    n = 10_000_000
    s1 = s2 = 0.0
    vals = []
    for x, y in mc_draws(202, n, 19, 40):
        f = (1 + 3 * 4.0) * (x / 19) / (y / 40)
        rho_hat = np.maximum(0.0, (f / (20 / 19) - 1) / 3)
        vals.append((rho_hat.sum(), (rho_hat ** 2).sum(), ((rho_hat - 4.0) ** 4).sum()))
    s1 = math.fsum(v[0] for v in vals)
    s2 = math.fsum(v[1] for v in vals)
    mean = s1 / n
    var = s2 / n - mean ** 2
    m4 = math.fsum(v[2] for v in vals) / n
    assert abs(mean - theory.mean_rho_truncated(t, "mle")) < 3 * math.sqrt(var / n)
    se_var = math.sqrt(max(m4 - var ** 2, 0) / n)
    assert abs(var - theory.var_rho_truncated(t, "mle")) < 3 * se_var


# --- variance components ----------------------------------------------------

def _vc_oracle(t, method):
    """Closed form through X = S B, Y = S (1 - B), S ~ chi2(df_u + df_e), B ~ Beta."""
    df_u, df_e, r, a = t.df_u, t.df_eps, t.r, t.a
    lam, s2e = mp.mpf(t.expected_ms_u), mp.mpf(t.sigma2_eps)
    k, l = mp.mpf(df_u) / 2, mp.mpf(df_e) / 2
    if method == "anova":
        beta, kappa, div = 1, mp.mpf(0), None
    else:
        beta = mp.mpf(a) / (a - 1) if method == "mle" else mp.mpf(1)
        kappa = beta * s2e * df_u / (lam * df_e)
        div = a * r if method == "mle" else a * r - 1
    b0 = kappa / (1 + kappa)

    def s_moment(m):
        out = mp.mpf(1)
        for i in range(m):
            out *= df_u + df_e + 2 * i
        return out

    def moment(i, j, upper):
        full = s_moment(i + j) * mp.beta(k + i, l + j) / mp.beta(k, l)
        frac = mp.betainc(k + i, l + j, 0, b0, regularized=True)
        return full * (1 - frac) if upper else full * frac

    c1, c2 = lam / (beta * df_u), s2e / df_e
    eu = (c1 * moment(1, 0, True) - c2 * moment(0, 1, True)) / r
    eu2 = (c1 ** 2 * moment(2, 0, True) - 2 * c1 * c2 * moment(1, 1, True) + c2 ** 2 * moment(0, 2, True)) / r ** 2
    ee = c2 * moment(0, 1, True)
    ee2 = c2 ** 2 * moment(0, 2, True)
    if div is not None:
        ee += (lam * moment(1, 0, False) + s2e * moment(0, 1, False)) / div
        ee2 += (lam ** 2 * moment(2, 0, False) + 2 * lam * s2e * moment(1, 1, False)
                + s2e ** 2 * moment(0, 2, False)) / div ** 2
    return [float(v) for v in (eu, ee, eu2 - eu ** 2, ee2 - ee ** 2)]


@pytest.mark.parametrize("a,r,s2u,s2e", [
    (8, 12, 0.5, 0.5), (6, 16, 0.5, 1.0), (48, 2, 0.5, 0.1), (5, 2, 0.0, 1.0), (10, 3, 2.0, 1.0), (30, 6, 0.05, 1.0),
])
@pytest.mark.parametrize("method", ["anova", "nanova", "mle"])
def test_vc_moments_match_closed_form(a, r, s2u, s2e, method):
    t = ModelTruth(a, r, s2u, s2e)
    got = theory.moments_vc_truncated(t, method).as_tuple()
    for g, e in zip(got, _vc_oracle(t, method)):
        assert g == pytest.approx(e, rel=1e-6, abs=1e-14)


def test_vc_anova_route_is_exact():
    t = ModelTruth(24, 4, 0.5, 0.5)
    m = theory.moments_vc_truncated(t, "anova")
    vu, ve = theory.var_vc_anova(t)
    assert m.mean_u == pytest.approx(0.5, rel=1e-12)
    assert m.mean_eps == pytest.approx(0.5, rel=1e-12)
    assert m.var_u == pytest.approx(vu, rel=1e-10)
    assert m.var_eps == pytest.approx(ve, rel=1e-10)


def test_vc_large_rho_limit():
    t = ModelTruth(10, 3, 500.0, 1.0)
    m = theory.moments_vc_truncated(t, "mle")
    beta = 10 / 9
    assert m.mean_u == pytest.approx((1 + 3 * 500.0) / (beta * 3) - 1 / 3, rel=1e-12)


def test_var_vc_anova_direct():
    vu, ve = theory.var_vc_anova(ModelTruth(3, 2, 0.0, 1.0))
    assert vu == pytest.approx(5 / 12, rel=1e-15)
    _, ve2 = theory.var_vc_anova(ModelTruth(6, 2, 0.0, 1.0))
    assert ve2 == pytest.approx(ve / 2, rel=1e-15)


def test_var_vc_anova_monte_carlo():
    t = ModelTruth(24, 4, 0.5, 0.5)
    n = 400_000
    x, y = chi_pair(303, n, 23, 72)
    ms_u = t.expected_ms_u * x / 23
    ms_e = 0.5 * y / 72
    su = (ms_u - ms_e) / 4
    vu, ve = theory.var_vc_anova(t)
    # sample variances of near-normal quantities: SE ~ var * sqrt(2 / n)
    assert abs(su.var() - vu) < 4 * vu * math.sqrt(2 / n) * 1.2
    assert abs(ms_e.var() - ve) < 4 * ve * math.sqrt(2 / n) * 1.2


def test_vc_moments_monte_carlo():
    t = ModelTruth(8, 12, 0.5, 0.5)
    n = 10_000_000
    beta = 8 / 7
    parts = []
    for x, y in mc_draws(404, n, 7, 88):
        ms_u = t.expected_ms_u * x / 7
        ms_e = 0.5 * y / 88
        inside = ms_u > beta * ms_e
        su = np.where(inside, (ms_u / beta - ms_e) / 12, 0.0)
        se = np.where(inside, ms_e, (t.expected_ms_u * x + 0.5 * y) / 96)
        parts.append([su.sum(), (su ** 2).sum(), se.sum(), (se ** 2).sum(),
                      (su ** 4).sum(), (se ** 4).sum(), (su ** 3).sum(), (se ** 3).sum()])
    s = [math.fsum(p[i] for p in parts) / n for i in range(8)]
    m = theory.moments_vc_truncated(t, "mle")
    for mean_th, var_th, m1, m2, m3, m4 in (
        (m.mean_u, m.var_u, s[0], s[1], s[6], s[4]),
        (m.mean_eps, m.var_eps, s[2], s[3], s[7], s[5]),
    ):
        var = m2 - m1 ** 2
        c4 = m4 - 4 * m1 * m3 + 6 * m1 ** 2 * m2 - 3 * m1 ** 4
        assert abs(m1 - mean_th) < 3 * math.sqrt(var / n)
        assert abs(var - var_th) < 3 * math.sqrt((c4 - var ** 2) / n)


def test_vc_monte_carlo_fallback(monkeypatch):
    t = ModelTruth(8, 12, 0.5, 0.5)
    exact = theory.moments_vc_truncated(t, "mle")

    def broken(*args, **kwargs):
        raise ConvergenceError("forced", {"reason": "test"})

    monkeypatch.setattr(theory, "_region_moments", broken)
    with pytest.raises(ConvergenceError) as info:
        theory.moments_vc_truncated(t, "mle", fallback=None)
    assert info.value.diagnostics == {"reason": "test"}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        approx = theory.moments_vc_truncated(t, "mle", mc_draws=400_000, seed=9)
    assert any("Monte Carlo" in str(w.message) for w in caught)
    assert approx.route == "montecarlo"
    assert abs(approx.mean_u - exact.mean_u) < 4 * approx.mc_se[0]
    assert abs(approx.mean_eps - exact.mean_eps) < 4 * approx.mc_se[1]
    assert approx.p_boundary == pytest.approx(exact.p_boundary, abs=0.005)


# --- asymptotics ------------------------------------------------------------

def test_asymptotic_covariance_direct():
    c = theory.asymptotic_covariance(0.5, 1.0, 3)
    assert c.sigma11 == pytest.approx(1.0)
    assert c.sigma12 == pytest.approx(-1 / 3)
    assert c.sigma22 == pytest.approx(1.5, rel=1e-14)
    assert theory.asymptotic_covariance(2.0, 1.0, 3).sigma2_rho == pytest.approx(11.0, rel=1e-14)
    assert theory.asymptotic_covariance(0.0, 1.0, 3).sigma2_rho is None
    with pytest.raises(DomainError):
        theory.asymptotic_covariance(1.0, 1.0, 1)


def test_asymptotic_signs_and_limit():
    for r in (2, 3, 10, 100):
        c = theory.asymptotic_covariance(0.7, 1.3, r)
        assert c.sigma11 > 0 and c.sigma22 > 0 and c.sigma12 < 0
    c = theory.asymptotic_covariance(0.7, 1.3, 10 ** 7)
    assert c.sigma22 == pytest.approx(2 * 0.7 ** 2, rel=1e-5)


def test_asymptotic_vs_exact_variance():
    # a Var[sigma2_u_hat] -> sigma22 as a grows
    t = ModelTruth(20000, 3, 0.5, 1.0)
    vu, _ = theory.var_vc_anova(t)
    assert 20000 * vu == pytest.approx(theory.asymptotic_covariance(0.5, 1.0, 3).sigma22, rel=1e-3)


# --- grids ------------------------------------------------------------------

def test_rho_grid():
    g = theory.rho_grid()
    assert len(g) == 50 and g[0] == 1.0 and g[-1] == pytest.approx(100.0)
    assert theory.rho_grid(2, 2, 1) == [2.0]
    with pytest.raises(DomainError):
        theory.rho_grid(0, 1, 3)


def test_theory_rows():
    rows = theory.theory_rows([(10, 3), (2, 2)], [2.0], "bias")
    ok = [r for r in rows if r[0] == 10 and r[4] == "anova"][0]
    assert ok[5] == pytest.approx(12.962962962962962) and ok[6] == "ok"
    na = [r for r in rows if r[0] == 2]
    assert all(r[5] is None and r[6] == "NA:moment_undefined" for r in na)
    rows = theory.theory_rows([(3, 3)], [0.5], "asymcov")
    assert [r[5] for r in rows if r[3] == "sigma22"][0] == pytest.approx(1.5)
    with pytest.raises(DomainError):
        theory.theory_rows([(3, 3)], [0.5], "nope")


def test_delta_method_variance_of_rho():
    # propagate the covariance matrix through rho = s2u / s2e
    for rho, r in ((2.0, 3), (0.3, 2), (7.0, 12)):
        c = theory.asymptotic_covariance(rho, 1.0, r)
        direct = c.sigma22 - 2 * rho * c.sigma12 + rho ** 2 * c.sigma11
        assert theory.sigma2_rho_delta(rho, r) == pytest.approx(direct, rel=1e-13)
        assert theory.sigma2_rho_delta(rho, r) > theory.sigma2_rho(rho, r)
    assert theory.sigma2_rho_delta(2.0, 3) == pytest.approx(49 / 3, rel=1e-14)


def test_rho_hat_variance_at_large_a():
    a, r, rho = 4000, 3, 2.0
    n = 20_000
    x, y = chi_pair(505, n, a - 1, a * (r - 1))
    f = (1 + r * rho) * (x / (a - 1)) / (y / (a * (r - 1)))
    z = math.sqrt(a) * (np.maximum(0.0, (f * (a - 1) / a - 1) / r) - rho)
    v = z.var()
    se = v * math.sqrt(2 / n)
    assert abs(v - theory.sigma2_rho_delta(rho, r)) < 4 * se
    assert abs(v - theory.sigma2_rho(rho, r)) > 10 * se
