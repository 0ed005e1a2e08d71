import numpy as np
import pytest
from scipy.stats import norm

from conftest import make_dataset
from stextremes.errors import DataError
from stextremes.evaluation import (
    cpo_pit,
    dic,
    evaluate,
    validation_metrics,
    waic,
)
from stextremes.inference import (
    FitOptions,
    LikelihoodBlock,
    ModelSpec,
    PriorSet,
    fit,
)
from stextremes.mesh import build_structured_mesh
from stextremes.priors import PcSdPrior


def conjugate_fit(n=24, seed=0, sigma=1.0, prior_prec=1e-10, y=None):
    """Intercept-only Gaussian model with known variance and near-flat prior."""
    rng = np.random.default_rng(seed)
    if y is None:
        y = 2.0 + rng.normal(0, sigma, n)
    coords = rng.uniform(0.1, 0.9, (len(y), 2))
    data = make_dataset(coords, (2020,), y_max=y)
    spec = ModelSpec(
        blocks=(LikelihoodBlock("max", "gaussian", "y_max"),),
        effects=(),
        priors=PriorSet(
            likelihood_sd={"max": PcSdPrior(3.0, 0.01)}, coeff_precision=prior_prec
        ),
        fixed={"sigma_max": sigma},
    )
    mesh = build_structured_mesh((0, 0, 1, 1), 3, 3)
    return fit(spec, data, FitOptions(mesh=mesh)), data, np.asarray(y, dtype=float)


class TestCpoPit:
    def test_matches_closed_form_loo_predictive(self):
        res, data, y = conjugate_fit(n=20, seed=3)
        cpo, pit, ls, n_failed = cpo_pit(res, data)
        n = len(y)
        idx = np.arange(n)
        for i in range(n):
            loo_mean = y[idx != i].mean()
            loo_sd = np.sqrt(1.0 + 1.0 / (n - 1))
            assert cpo[i] == pytest.approx(norm.pdf(y[i], loo_mean, loo_sd), abs=1e-6)
            assert pit[i] == pytest.approx(norm.cdf(y[i], loo_mean, loo_sd), abs=1e-6)
        assert n_failed == 0
        assert ls == pytest.approx(-np.sum(np.log(cpo)), abs=1e-12)

    def test_pit_half_at_loo_median(self):
        rng = np.random.default_rng(8)
        y = rng.normal(0, 1, 15)
        y[0] = y[1:].mean()  # equals its leave-one-out predictive median
        res, data, _ = conjugate_fit(y=y)
        _, pit, _, _ = cpo_pit(res, data)
        assert pit[0] == pytest.approx(0.5, abs=1e-6)

    def test_importance_shortcut_agrees_with_exact(self):
        res, data, y = conjugate_fit(n=16, seed=5)
        cpo_exact, pit_exact, _, _ = cpo_pit(res, data)
        cpo_is, pit_is, _, _ = cpo_pit(res, data, exact_max=0, mc_draws=4096, seed=11)
        assert np.max(np.abs(cpo_is / cpo_exact - 1.0)) < 0.15
        assert np.max(np.abs(pit_is - pit_exact)) < 0.05


@pytest.fixture(scope="module")
def toy():
    return conjugate_fit(n=30, seed=4, prior_prec=0.5)


class TestDicWaic:
    def exact_posterior(self, y, sigma, prior_prec):
        n = len(y)
        post_prec = n / sigma**2 + prior_prec
        return (n / sigma**2) * y.mean() / post_prec, 1.0 / post_prec

    def test_dic_matches_exact_posterior_sampling_oracle(self, toy):
        res, data, y = toy
        dic_val, p_d = dic(res, data)
        m, v = self.exact_posterior(y, 1.0, 0.5)
        rng = np.random.default_rng(99)
        draws = rng.normal(m, np.sqrt(v), 60_000)
        dev = -2.0 * np.array(
            [np.sum(norm.logpdf(y, mu, 1.0)) for mu in draws[:20_000]]
        )
        d_hat = -2.0 * np.sum(norm.logpdf(y, m, 1.0))
        p_d_oracle = dev.mean() - d_hat
        dic_oracle = d_hat + 2 * p_d_oracle
        assert dic_val == pytest.approx(dic_oracle, rel=0.02)
        assert p_d == pytest.approx(p_d_oracle, abs=0.02 * abs(dic_oracle))

    def test_waic_matches_exact_posterior_sampling_oracle(self, toy):
        res, data, y = toy
        waic_val, p_w = waic(res, data)
        m, v = self.exact_posterior(y, 1.0, 0.5)
        rng = np.random.default_rng(123)
        draws = rng.normal(m, np.sqrt(v), 40_000)
        lp = norm.logpdf(y[None, :], draws[:, None], 1.0)  # (draws, n)
        lppd = np.log(np.exp(lp).mean(axis=0))
        var_i = lp.var(axis=0, ddof=1)
        waic_oracle = -2 * np.sum(lppd - var_i)
        assert waic_val == pytest.approx(waic_oracle, rel=0.02)
        assert p_w == pytest.approx(np.sum(var_i), rel=0.05)

    def test_point_mass_posterior_degenerates_cleanly(self):
        res, data, y = conjugate_fit(n=12, seed=6, prior_prec=1e12)
        with pytest.warns(UserWarning, match="degenerate posterior"):
            dic_val, p_d = dic(res, data)
        assert p_d == 0.0
        waic_val, p_w = waic(res, data)
        assert p_w == pytest.approx(0.0, abs=1e-6)
        # x-hat is the prior mean 0 under the huge prior precision
        lp_hat = norm.logpdf(y, 0.0, 1.0).sum()
        assert waic_val == pytest.approx(-2 * lp_hat, abs=1e-3)
        assert dic_val == pytest.approx(-2 * lp_hat, abs=1e-3)

    def test_criteria_permutation_invariant(self):
        rng = np.random.default_rng(14)
        y = 2.0 + rng.normal(0, 1.0, 18)
        res_a, data_a, _ = conjugate_fit(y=y, prior_prec=0.5)
        perm = rng.permutation(len(y))
        res_b, data_b, _ = conjugate_fit(y=y[perm], prior_prec=0.5)
        assert dic(res_a, data_a)[0] == pytest.approx(dic(res_b, data_b)[0], abs=1e-8)
        assert waic(res_a, data_a)[0] == pytest.approx(waic(res_b, data_b)[0], abs=1e-8)
        ls_a = cpo_pit(res_a, data_a)[2]
        ls_b = cpo_pit(res_b, data_b)[2]
        assert ls_a == pytest.approx(ls_b, abs=1e-8)


class TestValidationMetrics:
    def test_perfect_predictions(self):
        y = np.array([1.0, 2.0, 3.0, 4.0])
        pred = {
            "resp_mean": y.copy(),
            "resp_q0.025": y - 1.0,
            "resp_q0.975": y + 1.0,
        }
        coverage, corr, rmse = validation_metrics(pred, y)
        assert coverage == 1.0
        assert corr == pytest.approx(1.0)
        assert rmse == 0.0

    def test_partial_coverage(self):
        y = np.array([0.0, 10.0])
        pred = {
            "resp_mean": np.array([0.0, 0.0]),
            "resp_q0.025": np.array([-1.0, -1.0]),
            "resp_q0.975": np.array([1.0, 1.0]),
        }
        coverage, _, rmse = validation_metrics(pred, y)
        assert coverage == 0.5
        assert rmse == pytest.approx(np.sqrt(50.0))

    def test_empty_validation_rejected(self):
        with pytest.raises(DataError, match="empty"):
            validation_metrics(
                {"resp_mean": np.array([]), "resp_q0.025": np.array([]), "resp_q0.975": np.array([])},
                np.array([]),
            )


def test_evaluate_bundle_runs():
    res, data, y = conjugate_fit(n=15, seed=10, prior_prec=0.5)
    report = evaluate(res, data)
    assert np.all(report.pit >= 0) and np.all(report.pit <= 1)
    assert np.all(report.cpo > 0)
    assert report.ls == pytest.approx(-np.sum(np.log(report.cpo)))
    assert report.p_waic >= 0
