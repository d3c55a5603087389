"""Tests for the nuisance layer: propensity, outcome, rank and CDF models."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import norm

from cfindex import glm
from cfindex.data import Dataset
from cfindex.errors import Separation
from cfindex.nuisance import (
    NuisanceConfig,
    PairwiseProbitCdf,
    cdf_matrix,
    cdf_weighted_means,
    cond_rank_expectation,
    counterfactual_cdf,
    fit_income_cdf,
    fit_nuisance,
    fit_outcome_mean,
    fit_pair_grid,
    fit_product_regression,
    fit_propensity,
    pairwise_matrix,
    rank_surfaces,
    trim_rows,
)
from cfindex.simulation import DgpConfig, generate, simulate
from helpers import cdf_value, ols_predict, pair_value, small_dataset, xi_oracle


def _independent(seed, n, K=3):
    """Randomized exposure, income independent of X."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    return Dataset(rng.exponential(size=n) + 1.0, rng.normal(size=n), rng.integers(0, K, n), X, n_levels=K)


class TestPropensity:
    def test_threshold_zero_keeps_all(self):
        data = generate(DgpConfig(n=500, seed=1))
        assert fit_propensity(data, 0.0).kept.size == 500

    def test_kept_fraction_on_simulation_design(self):
        data = generate(DgpConfig(n=2000, seed=2))
        assert fit_propensity(data, 0.01).kept.size / 2000 >= 0.95

    def test_trimming_idempotent(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(800, 1)) * 2.5
        eta = np.column_stack([np.zeros(800), 2.0 * X[:, 0], -2.0 * X[:, 0]])
        P = np.exp(eta) / np.exp(eta).sum(axis=1, keepdims=True)
        E = (rng.random(800)[:, None] > np.cumsum(P, axis=1)[:, :2]).sum(axis=1)
        data = Dataset(np.ones(800), rng.normal(size=800), E, X, n_levels=3)
        prop = fit_propensity(data, 0.05)
        assert 0 < prop.kept.size < 800
        again = trim_rows(prop.probabilities[prop.kept], 0.05)
        assert again.size == prop.kept.size

    def test_deterministic_class_separates(self):
        x = np.linspace(-2, 2, 60)
        data = Dataset(np.ones(60), x, (x > 0).astype(int), x[:, None], n_levels=2)
        with pytest.raises(Separation):
            fit_propensity(data, 0.01)

    def test_rejects_bad_threshold(self):
        with pytest.raises(ValueError):
            fit_propensity(generate(DgpConfig(n=100)), 0.5)


class TestOutcome:
    def test_constant_outcome(self):
        data = small_dataset(0, 30)
        data = Dataset(np.full(30, 4.0), data.income, data.exposure, data.covariates, n_levels=2)
        fit = fit_outcome_mean(data, 1)
        np.testing.assert_allclose(fit.predict(data.covariates), 4.0, atol=1e-10)

    def test_simulation_arm_one_coefficients(self):
        data = generate(DgpConfig(n=100_000, seed=4))
        fit = fit_outcome_mean(data, 1).glm_fit
        z = np.abs(fit.coefficients - np.array([8.0, 10.0, 1.0])) / fit.stderr
        assert np.all(z < 4)

    def test_plug_in_mean_randomized(self):
        data = _independent(5, 3000)
        fits = fit_nuisance(data, NuisanceConfig(trim_threshold=0.0), levels=[0])
        B = fits.level(0).outcome_values.mean()
        arm = data.y[data.exposure == 0]
        assert abs(B - arm.mean()) < 3 * arm.std() / np.sqrt(arm.size)


class TestPairModel:
    def test_tied_incomes_constant(self):
        X = np.random.default_rng(0).normal(size=(10, 1))
        fit = fit_pair_grid(X, X, np.ones(10))
        assert fit.constant == 1.0

    @pytest.mark.parametrize("self_pairs", [True, False])
    def test_structured_fit_matches_explicit_design(self, self_pairs):
        data = small_dataset(6, 40, q=2)
        X, inc = data.covariates, data.income
        m = inc.size
        j, k = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        j, k = j.ravel(), k.ravel()
        if not self_pairs:
            j, k = j[j != k], k[j != k]
        D = np.column_stack([np.ones(j.size), X[j], X[k]])
        yv = (inc[k] <= inc[j]).astype(float)
        explicit = glm.fit_binary_glm(D, yv, link="probit")
        structured = fit_pair_grid(X, X, inc, block_size=7, self_pairs=self_pairs)
        np.testing.assert_allclose(structured.coefficients, explicit.coefficients, atol=1e-8)

    def test_warm_start_same_estimate(self):
        data = generate(DgpConfig(n=1200, seed=7))
        arm = data.exposure == 2
        X, inc = data.covariates[arm], data.income[arm]
        warm = fit_pair_grid(X, X, inc)
        cold = glm.irls(
            lambda b: _pair_pass(X, inc, b), 5, "probit"
        )
        np.testing.assert_allclose(warm.coefficients, cold.coefficients, atol=1e-6)

    def test_correct_specification_on_simulation_arm(self):
        # pair surface is Phi((mu(x) - mu(x')) / (2 sqrt 2)) for arm 0
        pop = simulate(DgpConfig(n=3000, seed=8))
        data = pop.observed()
        arm = data.exposure == 0
        fit = fit_pair_grid(data.covariates[arm], data.covariates[arm], data.income[arm])
        b = fit.coefficients
        s = 2.0 * np.sqrt(2.0)
        np.testing.assert_allclose(b[1:3], np.array([1.0, -0.1]) / s, atol=0.06)
        np.testing.assert_allclose(b[3:5], -np.array([1.0, -0.1]) / s, atol=0.06)


def _pair_pass(X, inc, beta):
    m = inc.size
    j, k = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    D = np.column_stack([np.ones(m * m), X[j.ravel()], X[k.ravel()]])
    yv = (inc[k.ravel()] <= inc[j.ravel()]).astype(float)
    return glm._binary_pass(lambda: [(D, yv)], beta, "probit")


class TestIncomeCdf:
    @pytest.mark.parametrize("strategy", ["per-income-logit", "pairwise"])
    def test_independent_income_matches_arm_ecdf(self, strategy):
        data = _independent(9, 2000, K=1)
        fits = fit_nuisance(data, NuisanceConfig(trim_threshold=0.0, cdf_strategy=strategy))
        grid = np.quantile(data.income, np.linspace(0.02, 0.98, 25))
        ecdf = np.searchsorted(np.sort(data.income), grid, side="right") / data.n
        if strategy == "pairwise":
            # flat in x: pointwise agreement on rows near the covariate centre,
            # away from the extremes where slope noise dominates
            central = np.abs(data.covariates).max(axis=1) < 1.0
            N = cdf_matrix(fits, 0, grid)[:, central]
            assert np.max(np.abs(N - ecdf[:, None])) < 0.02
        assert np.max(np.abs(counterfactual_cdf(fits, 0, grid) - ecdf)) < 0.02

    def test_below_grid_is_zero(self):
        data = generate(DgpConfig(n=600, seed=10))
        fits = fit_nuisance(data, NuisanceConfig(trim_threshold=0.0), levels=[0])
        low = data.income[data.exposure == 0].min() - 1.0
        assert counterfactual_cdf(fits, 0, np.array([low]))[0] == 0.0

    def test_simulation_conditional_cdf(self):
        # arm 0: N(i, x) = Phi((i - x1 + 0.1 x2) / 2); about 20000 arm rows so
        # the sup over 520 points is not dominated by sampling noise
        data = generate(DgpConfig(n=60_000, seed=11))
        model = fit_income_cdf(data, 0)
        rng = np.random.default_rng(0)
        X = np.column_stack([rng.normal(1, 0.7, 40), rng.normal(10, 0.7, 40)])
        mu = X[:, 0] - 0.1 * X[:, 1]
        incomes = np.linspace(-3.0, 3.0, 13)
        truth = norm.cdf((incomes[:, None] - mu[None, :]) / 2.0)
        assert np.max(np.abs(model.surface(incomes, X) - truth)) < 0.03

    def test_simulation_counterfactual_cdf(self):
        data = generate(DgpConfig(n=20_000, seed=12))
        fits = fit_nuisance(data, NuisanceConfig(trim_threshold=0.0), levels=[0])
        incomes = np.linspace(-5, 5, 41)
        truth = norm.cdf(incomes / np.sqrt(1.0 + 0.01 + 4.0))
        assert np.max(np.abs(counterfactual_cdf(fits, 0, incomes) - truth)) < 0.03

    @pytest.mark.parametrize("seed", range(5))
    def test_xi_monotone_and_bounded(self, seed):
        data = generate(DgpConfig(n=400, seed=seed))
        fits = fit_nuisance(data, NuisanceConfig(trim_threshold=0.0))
        for e in range(3):
            xi = counterfactual_cdf(fits, e, data.income)
            order = np.argsort(data.income)
            assert np.all(np.diff(xi[order]) >= 0)
            assert xi.min() >= 0 and xi.max() <= 1

    def test_pairwise_aggregation_orders_agree(self):
        data = small_dataset(13, 30)
        fits = fit_nuisance(data, NuisanceConfig(trim_threshold=0.0, cdf_strategy="pairwise"))
        model = fits.level(1).cdf
        assert isinstance(model, PairwiseProbitCdf)
        raw = cdf_weighted_means(model, data.income, fits.x_rank)
        full = cdf_matrix(fits, 1, data.income)
        assert abs(raw.mean() - full.mean()) < 1e-12


class TestCondRank:
    def test_independent_is_half(self):
        data = _independent(14, 2000, K=2)
        fits = fit_nuisance(data, NuisanceConfig(trim_threshold=0.0))
        central = np.abs(fits.data.covariates).max(axis=1) < 1.0
        for e in range(2):
            assert np.max(np.abs(cond_rank_expectation(fits, e)[central] - 0.5)) < 0.03

    def test_no_covariates_equals_mean_xi(self):
        rng = np.random.default_rng(15)
        n = 150
        data = Dataset(rng.exponential(size=n) + 1, rng.normal(size=n), rng.integers(0, 2, n), np.empty((n, 0)), n_levels=2)
        fits = fit_nuisance(data, NuisanceConfig(trim_threshold=0.0))
        for e in range(2):
            arm = data.exposure == e
            xi = counterfactual_cdf(fits, e, data.income[arm])
            np.testing.assert_allclose(cond_rank_expectation(fits, e), xi.mean(), atol=1e-8)


class TestLoopOracles:
    @pytest.mark.parametrize("seed", range(4))
    @pytest.mark.parametrize("strategy", ["per-income-logit", "pairwise"])
    def test_surfaces_match_triple_loops(self, seed, strategy):
        data = small_dataset(100 + seed, 24, q=2, K=2)
        fits = fit_nuisance(data, NuisanceConfig(trim_threshold=0.0, cdf_strategy=strategy, block_size=5))
        X = fits.x_rank
        n = data.n
        for e in range(2):
            lf = fits.level(e)
            surf = rank_surfaces(fits, e)
            M = lf.outcome_values
            cond = [sum(pair_value(lf.pairwise, X[k], X[l]) for l in range(n)) / n for k in range(n)]
            colm = [sum(M[k] * pair_value(lf.pairwise, X[k], X[l]) for k in range(n)) / n for l in range(n)]
            np.testing.assert_allclose(surf.cond_xi, cond, atol=1e-10)
            np.testing.assert_allclose(surf.pair_colmean_m, colm, atol=1e-10)
            np.testing.assert_allclose(surf.xi, xi_oracle(lf.cdf, data.income, X), atol=1e-10)
            for j in np.flatnonzero(data.exposure == e):
                nm = sum(M[k] * cdf_value(lf.cdf, data.income[j], X[k]) for k in range(n)) / n
                assert surf.cdf_rowmean_m[j] == pytest.approx(nm, abs=1e-10)
            D = pairwise_matrix(fits, e)
            assert D[3, 7] == pytest.approx(pair_value(lf.pairwise, X[3], X[7]), abs=1e-12)

    def test_block_size_invariance(self):
        data = generate(DgpConfig(n=300, seed=16))
        a = fit_nuisance(data, NuisanceConfig(trim_threshold=0.0, block_size=7))
        b = fit_nuisance(data, NuisanceConfig(trim_threshold=0.0, block_size=4096))
        for e in range(3):
            sa, sb = rank_surfaces(a, e, with_product=True), rank_surfaces(b, e, with_product=True)
            for name in ("xi", "cond_xi", "pair_colmean_m", "cdf_rowmean_m", "a2_fitted", "a2_upper", "a2_cdf"):
                np.testing.assert_allclose(getattr(sa, name), getattr(sb, name), atol=1e-9, err_msg=name)


class TestProductRegression:
    def test_constant_outcome_scales(self):
        data = small_dataset(17, 30)
        c = 3.5
        data_c = Dataset(np.full(30, c), data.income, data.exposure, data.covariates, n_levels=2)
        xi = np.linspace(0, 1, 30)
        fit = fit_product_regression(data_c, 1, xi)
        arm = data.exposure == 1
        base = glm.fit_linear(np.column_stack([np.ones(arm.sum()), data.covariates[arm]]), xi[arm])
        np.testing.assert_allclose(fit.glm_fit.coefficients, c * base.coefficients, atol=1e-8)

    def test_matches_normal_equations(self):
        data = small_dataset(18, 28, q=2)
        xi = np.random.default_rng(0).random(28)
        arm = data.exposure == 0
        fit = fit_product_regression(data, 0, xi)
        oracle = ols_predict(data.covariates[arm], data.y[arm] * xi[arm], data.covariates)
        np.testing.assert_allclose(fit.predict(data.covariates), oracle, atol=1e-8)

    def test_factorization_when_outcome_independent(self):
        rng = np.random.default_rng(19)
        n = 4000
        X = rng.normal(size=(n, 1))
        income = X[:, 0] + rng.normal(size=n)
        data = Dataset(rng.exponential(size=n) + 1, income, rng.integers(0, 2, n), X, n_levels=2)
        fits = fit_nuisance(data, NuisanceConfig(trim_threshold=0.0), levels=[0])
        surf = rank_surfaces(fits, 0, with_product=True)
        approx = data.y[data.exposure == 0].mean() * surf.cond_xi
        assert abs(surf.a2_fitted.mean() - approx.mean()) < 0.02
