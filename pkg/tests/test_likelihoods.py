import numpy as np
import pytest
from scipy.integrate import quad
from scipy.optimize import minimize

from stextremes.errors import ConfigError
from stextremes.likelihoods import (
    FAMILIES,
    GaussianParams,
    GevParams,
    GumbelParams,
    gev_cdf,
    gev_logpdf,
    gumbel_cdf,
    gumbel_logpdf,
    loglik_derivs,
)


def fd_derivs(logpdf, x, mu, h=1e-5):
    """Finite-difference oracle: central for d/dmu, Richardson for d2/dmu2.

    The plain second central difference at h=1e-5 carries ~1e-5 roundoff;
    a larger step plus Richardson extrapolation keeps both truncation and
    roundoff below 1e-6.
    """
    f = lambda m: logpdf(x, m)
    d1 = (f(mu + h) - f(mu - h)) / (2 * h)

    def second(hh):
        return (f(mu + hh) - 2 * f(mu) + f(mu - hh)) / hh**2

    h2 = 1e-4
    d2 = (4.0 * second(h2 / 2) - second(h2)) / 3.0
    return d1, d2


class TestGumbel:
    def test_cdf_at_location(self):
        assert gumbel_cdf(0.0, GumbelParams(0.0, 1.0)) == pytest.approx(np.exp(-1))

    def test_cdf_frozen_value(self):
        # exp(-exp(-1)), cross-checked by integrating the pdf
        p = GumbelParams(0.0, 2.0)
        assert gumbel_cdf(2.0, p) == pytest.approx(0.6922006275553464, abs=1e-12)
        integral, _ = quad(lambda x: np.exp(gumbel_logpdf(x, p)), -40.0, 2.0)
        assert gumbel_cdf(2.0, p) == pytest.approx(integral, abs=1e-9)

    def test_cdf_monotone_to_one(self):
        p = GumbelParams(1.0, 0.7)
        x = np.linspace(-5, 30, 500)
        cdf = gumbel_cdf(x, p)
        assert np.all(np.diff(cdf) >= 0)
        assert cdf[-1] > 1 - 1e-12

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ConfigError):
            GumbelParams(0.0, 0.0)

    def test_precision_bookkeeping(self):
        assert GumbelParams(0.0, 2.0).precision == 0.25


class TestGev:
    def test_limit_agreement_with_gumbel(self):
        xs = np.linspace(-4, 8, 20)
        g = gumbel_cdf(xs, GumbelParams(0.5, 1.3))
        v = gev_cdf(xs, GevParams(0.5, 1.3, 1e-12))
        assert np.max(np.abs(g - v)) < 1e-8

    def test_cdf_frozen_value(self):
        p = GevParams(0.0, 1.0, 0.2)
        assert gev_cdf(1.0, p) == pytest.approx(np.exp(-(1.2 ** -5.0)), abs=1e-12)
        assert gev_cdf(1.0, p) == pytest.approx(0.6690626526678187, abs=1e-12)
        integral, _ = quad(lambda x: np.exp(gev_logpdf(x, p)), -1 / 0.2 + 1e-9, 1.0)
        assert gev_cdf(1.0, p) == pytest.approx(integral, abs=1e-7)

    def test_bounded_support_exact_tail(self):
        p = GevParams(0.0, 1.0, -0.5)
        upper = 0.0 + 1.0 / 0.5
        assert gev_cdf(upper + 0.1, p) == 1.0
        assert gev_logpdf(upper + 0.1, p) == -np.inf
        p_pos = GevParams(0.0, 1.0, 0.2)
        lower = -1.0 / 0.2
        assert gev_cdf(lower - 0.1, p_pos) == 0.0
        assert gev_logpdf(lower - 0.1, p_pos) == -np.inf

    def test_logpdf_continuity_across_tail_switch(self):
        for x in (-1.0, 0.3, 2.5):
            below = gev_logpdf(x, GevParams(0.0, 1.0, 0.999e-7))
            above = gev_logpdf(x, GevParams(0.0, 1.0, 1.001e-7))
            assert abs(below - above) < 1e-6


class TestNormalization:
    @pytest.mark.parametrize("seed", range(5))
    def test_pdfs_integrate_to_one(self, seed):
        rng = np.random.default_rng(seed)
        mu = rng.uniform(-2, 2)
        sigma = rng.uniform(0.3, 3.0)
        xi = rng.uniform(-0.35, 0.35)

        gum = FAMILIES["gumbel"]
        val, _ = quad(
            lambda x: np.exp(gum.logpdf(x, mu, (sigma,))), mu - 30 * sigma, mu + 60 * sigma
        )
        assert val == pytest.approx(1.0, abs=1e-6)

        gau = FAMILIES["gaussian"]
        val, _ = quad(
            lambda x: np.exp(gau.logpdf(x, mu, (sigma,))), mu - 12 * sigma, mu + 12 * sigma
        )
        assert val == pytest.approx(1.0, abs=1e-6)

        gev = FAMILIES["gev"]
        if xi > 0:
            # heavy upper tail: integrate out to the 1 - 1e-12 point
            hi = mu + sigma * ((1e-12) ** -xi - 1.0) / xi
            lo = mu - sigma / xi + 1e-12
        else:
            lo, hi = mu - 60 * sigma, mu + sigma / abs(xi) - 1e-12
        val, _ = quad(lambda x: np.exp(gev.logpdf(x, mu, (sigma, xi))), lo, hi, limit=200)
        assert val == pytest.approx(1.0, abs=1e-6)


class TestDerivatives:
    def test_gaussian_analytic(self):
        d1, d2 = loglik_derivs(2.0, "gaussian", GaussianParams(0.5, 2.0))
        assert d1 == pytest.approx((2.0 - 0.5) / 4.0)
        assert d2 == pytest.approx(-0.25)

    @pytest.mark.parametrize("seed", range(8))
    def test_gumbel_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = rng.uniform(-3, 6)
        mu = rng.uniform(-1, 1)
        sigma = rng.uniform(0.5, 2.5)
        d1, d2 = loglik_derivs(x, "gumbel", GumbelParams(mu, sigma))
        e1, e2 = fd_derivs(
            lambda xx, m: gumbel_logpdf(xx, GumbelParams(m, sigma)), x, mu
        )
        assert abs(d1 - e1) <= 1e-6 * max(1.0, abs(e1))
        assert abs(d2 - e2) <= 1e-6 * max(1.0, abs(e2))

    @pytest.mark.parametrize("seed", range(8))
    def test_gev_matches_finite_differences(self, seed):
        rng = np.random.default_rng(200 + seed)
        mu = rng.uniform(-1, 1)
        sigma = rng.uniform(0.5, 2.0)
        xi = 0.2
        # interior point of the support
        x = mu + sigma * rng.uniform(-2.0, 5.0)
        if 1 + xi * (x - mu) / sigma < 0.2:
            x = mu
        d1, d2 = loglik_derivs(x, "gev", GevParams(mu, sigma, xi))
        e1, e2 = fd_derivs(
            lambda xx, m: gev_logpdf(xx, GevParams(m, sigma, xi)), x, mu
        )
        assert abs(d1 - e1) <= 1e-6 * max(1.0, abs(e1))
        assert abs(d2 - e2) <= 1e-6 * max(1.0, abs(e2))

    def test_gumbel_hessian_always_negative(self):
        x = np.linspace(-10, 20, 100)
        _, d2 = FAMILIES["gumbel"].mu_derivs(x, 0.0, (1.0,))
        assert np.all(d2 < 0)

    def test_out_of_support_rejected(self):
        with pytest.raises(ConfigError):
            loglik_derivs(-10.0, "gev", GevParams(0.0, 1.0, 0.5))


class TestMleSanity:
    def test_gumbel_mle_recovers_parameters(self):
        rng = np.random.default_rng(31)
        fam = FAMILIES["gumbel"]
        true_mu, true_sigma = 3.0, 2.0
        n = 10_000
        y = fam.draw(rng, np.full(n, true_mu), (true_sigma,))

        def nll(p):
            return -np.sum(fam.logpdf(y, p[0], (np.exp(p[1]),)))

        res = minimize(nll, x0=np.array([0.0, 0.0]), method="Nelder-Mead")
        mu_hat, sigma_hat = res.x[0], np.exp(res.x[1])
        # asymptotic standard errors for the Gumbel MLE
        se_mu = true_sigma * 1.10867 / np.sqrt(n)
        se_sigma = true_sigma * 0.77970 / np.sqrt(n)
        assert abs(mu_hat - true_mu) < 3 * se_mu
        assert abs(sigma_hat - true_sigma) < 3 * se_sigma


class TestFamilyHelpers:
    def test_mean_and_variance_against_samples(self):
        rng = np.random.default_rng(5)
        for name, scale in [("gumbel", (1.5,)), ("gev", (1.5, 0.15)), ("gaussian", (1.5,))]:
            fam = FAMILIES[name]
            y = fam.draw(rng, np.full(200_000, 0.7), scale)
            assert fam.mean_given_mu(0.7, scale) == pytest.approx(
                y.mean(), abs=4 * y.std() / np.sqrt(len(y))
            )
            assert fam.var_given_mu(scale) == pytest.approx(y.var(), rel=0.05)

    def test_quantile_inverts_cdf(self):
        for name, scale in [("gumbel", (2.0,)), ("gev", (2.0, -0.2)), ("gaussian", (2.0,))]:
            fam = FAMILIES[name]
            ps = np.array([0.025, 0.5, 0.975])
            qs = fam.quantile(ps, 1.0, scale)
            assert np.allclose(fam.cdf(qs, 1.0, scale), ps, atol=1e-12)
