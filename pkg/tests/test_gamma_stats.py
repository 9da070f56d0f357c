import math

import numpy as np
import pytest
import torch
from scipy import integrate, special, stats

from gamma_stats import (
    GammaParamError,
    GammaParams,
    GammaParamsMap,
    digamma,
    gamma_expectation,
    gamma_kl,
    gamma_kl_map,
    gamma_log_likelihood,
    gamma_pdf,
    gamma_sample,
    lgamma,
)
from sector_ops import EmptySectorError, SectorMask


def _digamma_series(x):
    """psi(x) by upward recurrence to x >= 10, then the asymptotic expansion"""
    shift = 0.0
    while x < 10.0:
        shift -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    tail = inv2 * (1 / 12 - inv2 * (1 / 120 - inv2 * (1 / 252 - inv2 * (1 / 240 - inv2 * (1 / 132 - inv2 * 691 / 32760)))))
    return shift + math.log(x) - 0.5 / x - tail


class TestSpecialFunctions:

    @pytest.mark.parametrize("x", [0.1, 0.5, 1.0, 3.7, 25.0, 171.3])
    def test_lgamma_against_scipy(self, x):
        assert lgamma(x) == pytest.approx(special.gammaln(x), rel=1e-12)

    @pytest.mark.parametrize("x", [0.2, 1.0, 4.5, 60.0])
    def test_digamma_against_scipy(self, x):
        assert digamma(x) == pytest.approx(special.digamma(x), rel=1e-10)

    def test_digamma_against_series_on_log_grid(self):
        xs = np.geomspace(1e-3, 1e3, 1000)
        got = digamma(torch.tensor(xs, dtype=torch.float64)).numpy()
        expected = np.array([_digamma_series(x) for x in xs])
        assert np.abs(got - expected).max() < 1e-10

    def test_lgamma_on_log_grid(self):
        xs = np.geomspace(1e-3, 1e3, 1000)
        got = lgamma(torch.tensor(xs, dtype=torch.float64)).numpy()
        np.testing.assert_allclose(got, special.gammaln(xs), rtol=1e-12, atol=0)

    def test_lgamma_domain(self):
        with pytest.raises(ValueError):
            lgamma(0.0)
        with pytest.raises(ValueError):
            digamma(-1.0)


class TestDensity:

    def test_params_must_be_positive(self):
        with pytest.raises(GammaParamError):
            GammaParams(0.0, 1.0)
        with pytest.raises(GammaParamError):
            GammaParams(1.0, -2.0)

    @pytest.mark.parametrize("alpha,beta", [(1.0, 1.0), (3.75, 10.8), (0.7, 2.0)])
    def test_pdf_matches_scipy_and_integrates_to_one(self, alpha, beta):
        p = GammaParams(alpha, beta)
        for x in (0.05, 0.3, 1.2):
            assert gamma_pdf(x, p) == pytest.approx(stats.gamma.pdf(x, alpha, scale=1 / beta), rel=1e-9)
        total, _ = integrate.quad(lambda x: gamma_pdf(x, p), 0, np.inf)
        assert total == pytest.approx(1.0, abs=1e-5)

    def test_pdf_domain(self):
        with pytest.raises(ValueError):
            gamma_pdf(0.0, GammaParams(2.0, 1.0))

    def test_log_likelihood_grid(self):
        values = np.array([0.2, 0.5, 0.9])
        alpha = torch.tensor([[1.0], [2.0]], dtype=torch.float64)
        beta = torch.tensor([[1.0, 3.0]], dtype=torch.float64)
        ll = gamma_log_likelihood(values, alpha, beta)
        assert ll.shape == (2, 2)
        expected = stats.gamma.logpdf(values, 2.0, scale=1 / 3.0).sum()
        assert ll[1, 1].item() == pytest.approx(expected, rel=1e-10)


class TestKL:

    def test_self_kl_is_zero(self):
        p = GammaParams(3.75, 10.8)
        assert gamma_kl(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_kl_matches_numerical_integral(self):
        p, q = GammaParams(2.5, 4.0), GammaParams(1.5, 2.0)

        def integrand(x):
            a = stats.gamma.pdf(x, p.alpha, scale=1 / p.beta)
            return a * (stats.gamma.logpdf(x, p.alpha, scale=1 / p.beta) - stats.gamma.logpdf(x, q.alpha, scale=1 / q.beta))

        numeric, _ = integrate.quad(integrand, 0, np.inf, limit=200)
        assert gamma_kl(p, q) == pytest.approx(numeric, rel=1e-6)

    def test_kl_matches_quadrature_over_random_pairs(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(100):
            p = GammaParams(*rng.uniform(0.5, 20, 2))
            q = GammaParams(*rng.uniform(0.5, 20, 2))
            dist_p = stats.gamma(p.alpha, scale=1 / p.beta)
            dist_q = stats.gamma(q.alpha, scale=1 / q.beta)

            # x = exp(u) keeps the integrand smooth near 0 for alpha < 1
            def integrand(u):
                x = math.exp(u)
                return dist_p.pdf(x) * x * (dist_p.logpdf(x) - dist_q.logpdf(x))

            lo, hi = math.log(dist_p.ppf(1e-15)), math.log(dist_p.isf(1e-15))
            numeric, _ = integrate.quad(integrand, lo, hi, limit=400, epsabs=1e-12, epsrel=1e-12)
            worst = max(worst, abs(gamma_kl(p, q) - numeric))
        assert worst < 1e-6

    def test_kl_known_value(self):
        assert gamma_kl(GammaParams(2.0, 1.0), GammaParams(1.0, 1.0)) == pytest.approx(1 - np.euler_gamma, abs=1e-12)

    def test_kl_non_negative_over_grid(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = GammaParams(*rng.uniform(0.1, 20, 2))
            q = GammaParams(*rng.uniform(0.1, 20, 2))
            assert gamma_kl(p, q) >= 0

    def test_kl_map_matches_scalar_and_ignores_background(self):
        prior = GammaParams(3.75, 10.8)
        alpha = torch.full((1, 1, 2, 2), 2.0, dtype=torch.float64)
        beta = torch.full((1, 1, 2, 2), 5.0, dtype=torch.float64)
        alpha[0, 0, 1, 1] = 50.0
        mask = SectorMask(torch.tensor([[[[1.0, 1.0], [1.0, 0.0]]]]))
        value = gamma_kl_map(GammaParamsMap(alpha, beta), prior, mask)
        assert value.item() == pytest.approx(gamma_kl(GammaParams(2.0, 5.0), prior), rel=1e-12)

    def test_kl_map_empty_sector(self):
        params = GammaParamsMap.constant(GammaParams(1.0, 1.0), (1, 1, 2, 2))
        with pytest.raises(EmptySectorError):
            gamma_kl_map(params, GammaParams(1.0, 1.0), SectorMask(torch.zeros(1, 1, 2, 2)))


class TestSampling:

    def test_moments(self):
        p = GammaParams(3.75, 10.8)
        draws = gamma_sample(p, 200_000, seed=0).numpy()
        assert draws.mean() == pytest.approx(p.alpha / p.beta, rel=0.01)
        assert draws.var() == pytest.approx(p.alpha / p.beta ** 2, rel=0.03)
        assert (draws > 0).all()

    def test_ks_against_scipy(self):
        p = GammaParams(0.8, 2.0)
        draws = gamma_sample(p, 5000, seed=1).numpy()
        assert stats.kstest(draws, "gamma", args=(p.alpha, 0, 1 / p.beta)).pvalue > 0.001

    def test_seed_reproducible(self):
        p = GammaParams(2.0, 3.0)
        assert torch.equal(gamma_sample(p, 10, seed=4), gamma_sample(p, 10, seed=4))

    def test_reparameterised_gradients(self):
        alpha = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)
        beta = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
        draws = gamma_sample(GammaParams(alpha, beta), 50_000, seed=2)
        draws.mean().backward()
        # dE[X]/dalpha = 1/beta, dE[X]/dbeta = -alpha/beta^2
        assert alpha.grad.item() == pytest.approx(1 / 3.0, rel=0.05)
        assert beta.grad.item() == pytest.approx(-2.0 / 9.0, rel=0.05)

    def test_expectation(self):
        assert gamma_expectation(GammaParams(3.0, 6.0)) == 0.5
        assert not math.isnan(gamma_expectation(GammaParams(1e-3, 1e3)))
