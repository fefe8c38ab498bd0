import math

import numpy as np
import pytest

from misteri import (
    Dataset,
    MixtureParams,
    NumericError,
    Scenario,
    Theta,
    alternating_fit,
    cmle_fit,
    default_mixture,
    fit_mixture_residuals,
    generate,
    loglik,
    mixture_conditional_mean,
    mixture_estimate,
    mixture_loglik,
    mixture_weights,
    mu_eval,
    true_theta,
)

CONSTRAINT_TOL = 1e-8


def _assert_constraints(mix: MixtureParams):
    assert abs(mix.pi.sum() - 1.0) <= CONSTRAINT_TOL
    assert abs(mix.pi @ mix.mu) <= CONSTRAINT_TOL
    assert abs(mix.pi @ (mix.delta**2 + mix.mu**2) - 1.0) <= CONSTRAINT_TOL


def _theta(eta_z=0.5):
    return Theta(beta=0.8, gamma=0.2, theta0=1.0, thetaz=np.array([0.3]),
                 eta0=0.1, etaz=np.array([eta_z]))


def _standard_normal_mix():
    return MixtureParams(pi=np.array([1.0]), mu=np.array([0.0]), delta=np.array([1.0]))


class TestMixtureParams:
    def test_benchmark_mixture_satisfies_constraints(self):
        mix = default_mixture()
        _assert_constraints(mix)
        np.testing.assert_allclose(mix.pi, [0.4, 0.6])
        np.testing.assert_allclose(mix.mu, [-0.6, 0.4])
        assert mix.delta[0] == 0.5
        assert mix.delta[1] == pytest.approx(1.049, abs=1e-3)

    def test_violations_rejected(self):
        with pytest.raises(ValueError):
            MixtureParams(pi=np.array([0.5, 0.6]), mu=np.array([0.0, 0.0]),
                          delta=np.array([1.0, 1.0]))
        with pytest.raises(ValueError):
            MixtureParams(pi=np.array([0.5, 0.5]), mu=np.array([0.5, 0.0]),
                          delta=np.array([1.0, 1.0]))
        with pytest.raises(ValueError):
            MixtureParams(pi=np.array([0.5, 0.5]), mu=np.array([0.0, 0.0]),
                          delta=np.array([2.0, 2.0]))


class TestMixtureWeights:
    def test_no_selection_all_ones(self):
        mix = default_mixture()
        np.testing.assert_allclose(mixture_weights(0.0, 1.3, 1.7, mix), 1.0)

    def test_zero_treatment_all_ones(self):
        mix = default_mixture()
        np.testing.assert_allclose(mixture_weights(0.4, 0.0, 1.7, mix), 1.0)

    def test_frozen_component_value(self):
        mix = MixtureParams(pi=np.array([0.4, 0.6]), mu=np.array([-0.6, 0.4]),
                            delta=default_mixture().delta)
        w = mixture_weights(0.2, 1.0, 1.0, mix)
        # exp(0.2*(-0.6) + 0.25*0.04/2) = exp(-0.115)
        assert w[0] == pytest.approx(math.exp(-0.115), rel=1e-12)
        assert math.exp(-0.115) == pytest.approx(0.891366, abs=1e-6)


class TestConditionalMean:
    def test_collapses_without_selection(self):
        th = Theta(beta=0.8, gamma=0.0, theta0=1.0, thetaz=np.array([0.3]),
                   eta0=0.1, etaz=np.array([0.5]))
        mix = default_mixture()
        for a in (-1.0, 0.0, 2.0):
            for z in ([0.0], [1.0], [2.0]):
                expected = 0.8 * a + 1.0 + 0.3 * z[0]
                assert mixture_conditional_mean(th, mix, a, z) == pytest.approx(expected, rel=1e-12)

    def test_single_standard_component_equals_normal_mean(self):
        th = _theta()
        mix = _standard_normal_mix()
        for a in (-0.7, 1.2):
            for z in ([0.0], [2.0]):
                assert mixture_conditional_mean(th, mix, a, z) == pytest.approx(
                    mu_eval(th, a, z), rel=1e-12
                )

    def test_against_hand_rolled_formula_and_monte_carlo(self):
        th = _theta(eta_z=0.5)
        mix = default_mixture()
        a, z = 1.0, 1.0
        s2 = math.exp(0.1 + 0.5)
        sigma = math.sqrt(s2)
        # independent transcription of the tilted-mean expression
        t = th.gamma * a * sigma
        omega = np.exp(t * mix.mu + 0.5 * mix.delta**2 * t * t)
        pw = mix.pi * omega
        hand = (
            th.beta * a + 1.0 + 0.3 * z
            + sigma * (pw @ (mix.mu + mix.delta**2 * th.gamma * a * sigma)) / pw.sum()
        )
        ours = mixture_conditional_mean(th, mix, a, [z])
        assert ours == pytest.approx(hand, rel=1e-12)
        # Monte Carlo: outcomes in the (a, z) cell average to the formula
        rng = np.random.default_rng(77)
        comp = rng.choice(2, size=10**6, p=mix.pi)
        eps = mix.mu[comp] + mix.delta[comp] * rng.standard_normal(10**6)
        y = ours + sigma * eps
        assert abs(y.mean() - ours) < 0.01


class TestMixtureLoglik:
    def test_single_component_equals_normal(self):
        th = _theta(eta_z=0.2)
        data = generate(Scenario("table1_normal", n=2000, seed=1))
        assert mixture_loglik(th, _standard_normal_mix(), data) == pytest.approx(
            loglik(th, data), abs=1e-10 * abs(loglik(th, data))
        )

    def test_two_components_never_worse_after_fit(self):
        rng = np.random.default_rng(2)
        eps = rng.standard_normal(3000)
        from misteri.mixture import _residual_loglik

        one = fit_mixture_residuals(eps, K=1)
        two = fit_mixture_residuals(eps, K=2)
        ll1 = _residual_loglik(eps, one.pi, one.mu, one.delta)
        ll2 = _residual_loglik(eps, two.pi, two.mu, two.delta)
        assert ll2 >= ll1 - 1e-6

    def test_truth_beats_misspecified_normal(self):
        wins = 0
        for seed in range(20):
            sc = Scenario("table3_mixture", n=100_000, eta_z=0.5,
                          mixture=default_mixture(), seed=seed)
            data = generate(sc)
            ll_mix = mixture_loglik(true_theta(sc), default_mixture(), data) / data.n
            ll_norm = loglik(cmle_fit(data).theta_hat,
                             Dataset(y=data.y, a=data.a - data.a.mean(), z=data.z)) / data.n
            if ll_mix > ll_norm:
                wins += 1
        assert wins == 20

    def test_label_swap_invariance(self):
        th = _theta()
        mix = default_mixture()
        swapped = MixtureParams(pi=mix.pi[::-1].copy(), mu=mix.mu[::-1].copy(),
                                delta=mix.delta[::-1].copy())
        data = generate(Scenario("table3_mixture", n=1000, eta_z=0.5,
                                 mixture=mix, seed=3))
        assert mixture_loglik(th, swapped, data) == pytest.approx(
            mixture_loglik(th, mix, data), rel=1e-12
        )
        assert mixture_conditional_mean(th, swapped, 1.0, [1.0]) == pytest.approx(
            mixture_conditional_mean(th, mix, 1.0, [1.0]), rel=1e-12
        )


class TestFitMixtureResiduals:
    def test_standard_normal_close_in_distribution(self):
        rng = np.random.default_rng(4)
        eps = rng.standard_normal(100_000)
        mix = fit_mixture_residuals(eps, K=2)
        _assert_constraints(mix)
        from scipy import stats

        grid = np.linspace(-4, 4, 401)
        cdf = sum(
            mix.pi[k] * stats.norm.cdf(grid, loc=mix.mu[k], scale=mix.delta[k])
            for k in range(2)
        )
        assert np.max(np.abs(cdf - stats.norm.cdf(grid))) < 0.01

    def test_recovers_benchmark_components(self):
        truth = default_mixture()
        rng = np.random.default_rng(5)
        n = 100_000
        comp = rng.choice(2, size=n, p=truth.pi)
        eps = truth.mu[comp] + truth.delta[comp] * rng.standard_normal(n)
        mix = fit_mixture_residuals(eps, K=2)
        _assert_constraints(mix)
        order = np.argsort(mix.mu)
        np.testing.assert_allclose(mix.pi[order], truth.pi, atol=0.05)
        np.testing.assert_allclose(mix.mu[order], truth.mu, atol=0.05)
        np.testing.assert_allclose(mix.delta[order], truth.delta, atol=0.05)

    def test_single_component_is_standard_normal(self):
        rng = np.random.default_rng(6)
        mix = fit_mixture_residuals(rng.standard_normal(500) * 3.0 + 1.0, K=1)
        assert mix.pi[0] == 1.0
        assert mix.mu[0] == pytest.approx(0.0, abs=1e-12)
        assert mix.delta[0] == pytest.approx(1.0, abs=1e-12)

    def test_sample_size_precondition(self):
        with pytest.raises(ValueError):
            fit_mixture_residuals(np.arange(10.0), K=2)

    def test_degenerate_component_error(self):
        # a point mass cannot be fit with a positive-scale component
        eps = np.concatenate([np.zeros(500), np.array([100.0] * 3)])
        with pytest.raises(NumericError):
            fit_mixture_residuals(eps, K=2)


class TestAlternatingFit:
    def test_trace_non_decreasing_and_converges(self):
        sc = Scenario("table3_mixture", n=10_000, eta_z=0.5,
                      mixture=default_mixture(), seed=11)
        fit = alternating_fit(generate(sc), K=2)
        assert fit.converged
        trace = np.array(fit.loglik_trace)
        assert np.all(np.diff(trace) >= -1e-10)
        _assert_constraints(fit.mix)
        assert fit.theta.beta == pytest.approx(0.8, abs=0.1)
        assert fit.theta.gamma == pytest.approx(0.2, abs=0.1)

    def test_normal_data_matches_cmle(self):
        data = generate(Scenario("table1_normal", n=10_000, eta_z=0.3, seed=12))
        ml = cmle_fit(data)
        est = mixture_estimate(data, K=2, n_boot=60, seed=0)
        assert abs(est.beta - ml.beta) <= 3 * ml.se[0]
        assert abs(est.gamma - ml.gamma) <= 3 * ml.se[1]

    def test_estimate_result_fields(self):
        sc = Scenario("table3_mixture", n=4000, eta_z=0.5,
                      mixture=default_mixture(), seed=13)
        est = mixture_estimate(generate(sc), K=2, n_boot=40, seed=1)
        assert est.method == "mixture"
        assert est.kappa is None
        assert np.isfinite(est.se[:2]).all()
        assert est.ci_low[0] <= est.beta <= est.ci_high[0]
