"""Tests for the simulation design, true values and the Monte Carlo harness."""

from __future__ import annotations

import csv
import io
import math

import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss

from cfindex.nuisance import NuisanceConfig
from cfindex.simulation import (
    CSV_COLUMNS,
    ESTIMANDS,
    REFERENCE_TRUTH,
    DgpConfig,
    McSettings,
    Truth,
    aggregate,
    approximate_truth,
    concentration_index,
    generate,
    replicate_seed,
    run_mc,
    run_replicate,
    scenario_covariates,
    simulate,
    transformed,
    true_propensity,
)


class TestDgp:
    def test_bit_identical_on_repeat(self):
        a = generate(DgpConfig(n=500, seed=7))
        b = generate(DgpConfig(n=500, seed=7))
        for name in ("y", "income", "exposure", "covariates"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
        c = generate(DgpConfig(n=500, seed=8))
        assert not np.array_equal(a.y, c.y)

    def test_potential_outcome_means(self):
        pop = simulate(DgpConfig(n=1_000_000, seed=1))
        assert pop.outcomes[:, 0].mean() == pytest.approx(20.0, abs=0.02)
        assert pop.outcomes[:, 1].mean() == pytest.approx(28.0, abs=0.02)
        assert pop.outcomes[:, 2].mean() == pytest.approx(38.0, abs=0.02)
        assert pop.covariates.mean(axis=0) == pytest.approx([1.0, 10.0], abs=0.005)

    def test_arm_zero_outcome_mean(self):
        data = generate(DgpConfig(n=1_000_000, seed=2))
        arm = data.exposure == 0
        # selection into arm 0 lowers X, so compare with the covariate-adjusted mean
        x = data.covariates[arm]
        assert data.y[arm].mean() == pytest.approx(np.mean(10 * x[:, 0] + x[:, 1]), abs=0.02)

    def test_noise_convention(self):
        pop_sd = simulate(DgpConfig(n=200_000, seed=3))
        pop_var = simulate(DgpConfig(n=200_000, seed=3, noise_scale_is_sd=False))
        resid_sd = pop_sd.outcomes[:, 0] - 10 * pop_sd.covariates[:, 0] - pop_sd.covariates[:, 1]
        resid_var = pop_var.outcomes[:, 0] - 10 * pop_var.covariates[:, 0] - pop_var.covariates[:, 1]
        assert resid_sd.std() == pytest.approx(2.0, abs=0.01)
        assert resid_var.std() == pytest.approx(math.sqrt(2.0), abs=0.01)

    def test_exposure_shares_match_quadrature(self):
        data = generate(DgpConfig(n=1_000_000, seed=4))
        nodes, weights = hermegauss(60)
        weights = weights / weights.sum()
        x1, x2 = np.meshgrid(1.0 + nodes, 10.0 + nodes, indexing="ij")
        pi = true_propensity(np.column_stack([x1.ravel(), x2.ravel()]))
        w = np.outer(weights, weights).ravel()
        expected = w @ pi
        observed = np.bincount(data.exposure, minlength=3) / data.n
        np.testing.assert_allclose(observed, expected, atol=0.005)

    def test_propensity_rows_sum_to_one(self):
        X = np.column_stack([np.linspace(-5, 8, 50), np.linspace(5, 16, 50)])
        P = true_propensity(X)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)

    def test_scenario_covariates(self):
        X = np.array([[1.0, 10.0], [-2.0, 9.0]])
        Xt = transformed(X)
        np.testing.assert_allclose(Xt, np.log(X**2))
        cov = scenario_covariates(X, "correct")
        assert all(np.array_equal(v, X) for v in cov.values())
        cov = scenario_covariates(X, "wrong_pi")
        assert np.array_equal(cov["propensity"], Xt) and np.array_equal(cov["outcome"], X)
        cov = scenario_covariates(X, "wrong_y")
        assert np.array_equal(cov["propensity"], X) and np.array_equal(cov["outcome"], Xt)
        cov = scenario_covariates(X, "wrong_all")
        assert np.array_equal(cov["propensity"], Xt) and np.array_equal(cov["outcome"], Xt)
        assert np.array_equal(cov["rank"], X)

    @pytest.mark.parametrize("kwargs", [{"n": 10}, {"scenario": "nope"}, {"income1_sign": 0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            DgpConfig(**kwargs)


class TestTruth:
    def test_concentration_index_brute_force(self):
        rng = np.random.default_rng(5)
        y = rng.exponential(size=40) + 1
        inc = rng.integers(0, 6, 40).astype(float)
        F = [(inc <= v).mean() for v in inc]
        expected = 2 * np.mean(y * F) / y.mean() - 1
        assert concentration_index(y, inc) == pytest.approx(expected, abs=1e-14)

    def test_reference_values(self):
        truth = approximate_truth(1_000_000, seed=11)
        assert truth.g[0] == pytest.approx(REFERENCE_TRUTH["G(0)"], abs=0.002)
        assert truth.theta1 == pytest.approx(REFERENCE_TRUTH["theta(1)"], abs=0.002)
        assert truth.theta2 == pytest.approx(REFERENCE_TRUTH["theta(2)"], abs=0.002)

    def test_two_seeds_agree(self):
        a = approximate_truth(1_000_000, seed=12).values()
        b = approximate_truth(1_000_000, seed=13).values()
        for k in ESTIMANDS:
            assert abs(a[k] - b[k]) < 0.002

    def test_rejects_small_population(self):
        with pytest.raises(ValueError):
            approximate_truth(1000)

    def test_as_dict(self):
        t = Truth((0.1, -0.1, 0.2), 10**5, 0)
        d = t.as_dict()
        assert d["theta(1)"] == pytest.approx(-0.2)
        assert d["theta(2)"] == pytest.approx(0.1)


_FAST = NuisanceConfig(trim_threshold=0.0, grid_size=40)


class TestHarness:
    def test_replicate_seed_distinct(self):
        seeds = {replicate_seed(0, 1000, r) for r in range(50)}
        assert len(seeds) == 50
        assert replicate_seed(0, 1000, 3) != replicate_seed(1, 1000, 3)
        assert replicate_seed(0, 1000, 3) != replicate_seed(0, 2000, 3)

    def test_single_replicate(self):
        rep = run_mc(300, 1, estimators=("one-step",), nuisance=_FAST, workers=1)
        row = rep.row("correct", "theta(1)", "one-step")
        assert row.replicates == 1
        assert row.mc_sd is None
        assert row.coverage in (0.0, 1.0)
        single = run_replicate(
            McSettings(n=300, scenarios=("correct",), estimators=("one-step",), nuisance=_FAST), 0
        )
        value = single["correct"][("theta(1)", "one-step")][0]
        assert row.bias == pytest.approx(value - REFERENCE_TRUTH["theta(1)"], abs=1e-15)

    def test_csv_layout(self):
        rep = run_mc(300, 3, scenarios=("correct", "wrong_y"), estimators=("plug-in", "one-step"), nuisance=_FAST, workers=1)
        rows = list(csv.reader(io.StringIO(rep.to_csv())))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert len(rows) == 1 + 2 * 3 * 2
        text = rep.to_text()
        assert "[wrong_y]" in text and "one-step" in text

    def test_estimator_order_invariance(self):
        base = McSettings(n=300, scenarios=("correct", "wrong_pi"), estimators=("plug-in", "one-step", "est-eq"), nuisance=_FAST)
        swapped = McSettings(n=300, scenarios=("wrong_pi", "correct"), estimators=("est-eq", "plug-in", "one-step"), nuisance=_FAST)
        a = run_replicate(base, 2)
        b = run_replicate(swapped, 2)
        for scenario in ("correct", "wrong_pi"):
            assert a[scenario] == b[scenario]

    def test_workers_do_not_change_results(self):
        kwargs = dict(estimators=("one-step",), nuisance=_FAST, master_seed=3)
        serial = run_mc(300, 4, workers=1, **kwargs)
        pooled = run_mc(300, 4, workers=2, **kwargs)
        assert serial.to_csv() == pooled.to_csv()

    def test_aggregate_coverage(self):
        settings = McSettings(n=100, scenarios=("correct",), estimators=("one-step",))
        truth = {"G(0)": 0.0, "theta(1)": 0.0, "theta(2)": 0.0}
        results = [
            {"correct": {("G(0)", "one-step"): (0.5, 1.0)}},
            {"correct": {("G(0)", "one-step"): (3.0, 1.0)}},
            {"correct": "Separation: boom"},
        ]
        rep = aggregate(results, truth, settings)
        row = rep.row("correct", "G(0)", "one-step")
        assert row.bias == pytest.approx(1.75)
        assert row.coverage == pytest.approx(0.5)
        assert row.est_sd == pytest.approx(1.0)
        assert row.failures == 1

    def test_truth_argument(self):
        truth = {"G(0)": 0.0, "theta(1)": 0.0, "theta(2)": 0.0}
        rep = run_mc(300, 2, estimators=("plug-in",), truth=truth, nuisance=_FAST, workers=1)
        assert rep.truth == truth
