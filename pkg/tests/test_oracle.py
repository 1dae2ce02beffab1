"""Exact enumeration oracle and regime-conditional RTS smoother."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import make_benchmark_model, make_random_model
from rbsmc.kalman import backward_info_sequence, gaussian_backward_integral
from rbsmc.model import RegimeModel, simulate
from rbsmc.oracle import InstanceTooLargeError, enumerate_posterior, rts_given_regimes


class TestRtsGivenRegimes:
    def test_loglik_matches_backward_route(self, rng):
        model = make_random_model(rng, J=2, m=2, p=1)
        regimes = rng.integers(0, 2, size=7)
        ys = rng.normal(size=(7, 1))
        rts = rts_given_regimes(model, regimes, ys)
        stat = backward_info_sequence(model, regimes, ys)[0]
        alt = gaussian_backward_integral(model.mu1, model.Sigma1, stat)
        assert rts.loglik == pytest.approx(alt, abs=1e-9)

    def test_terminal_smoothed_equals_filtered(self, rng):
        model = make_random_model(rng, J=2, m=1, p=1)
        regimes = rng.integers(0, 2, size=5)
        ys = rng.normal(size=(5, 1))
        rts = rts_given_regimes(model, regimes, ys)
        np.testing.assert_allclose(rts.smoothed_means[-1], rts.filtered_means[-1], atol=1e-12)
        np.testing.assert_allclose(rts.smoothed_covs[-1], rts.filtered_covs[-1], atol=1e-12)

    def test_smoothing_reduces_uncertainty(self, rng):
        model = make_random_model(rng, J=1, m=1, p=1)
        ys = rng.normal(size=(10, 1))
        rts = rts_given_regimes(model, np.zeros(10, dtype=int), ys)
        assert np.all(rts.smoothed_covs[:, 0, 0] <= rts.filtered_covs[:, 0, 0] + 1e-12)

    def test_lag_one_cov_against_joint_oracle(self, rng):
        # Build the full joint Gaussian over (z_1..z_n) for a scalar J=1 model
        # and compare conditional moments entry by entry.
        model = make_random_model(rng, J=1, m=1, p=1)
        n = 4
        ys = rng.normal(size=(n, 1))
        d, T, hvar = model.d[0, 0], model.T[0, 0, 0], model.Hbar[0, 0, 0]
        c, B, gvar = model.c[0, 0], model.B[0, 0, 0], model.Gbar[0, 0, 0]
        mu1, s1 = model.mu1[0], model.Sigma1[0, 0]

        # Prior mean and covariance of (z_1..z_n).
        mean = np.empty(n)
        mean[0] = mu1
        for i in range(1, n):
            mean[i] = d + T * mean[i - 1]
        cov = np.empty((n, n))
        var = [s1]
        for i in range(1, n):
            var.append(T * T * var[-1] + hvar)
        for i in range(n):
            for j in range(n):
                lo, hi = min(i, j), max(i, j)
                cov[i, j] = var[lo] * T ** (hi - lo)
        # Observation: y = c + B z + noise.
        obs_cov = B * B * cov + gvar * np.eye(n)
        cross = B * cov  # Cov(z, y)
        resid = ys[:, 0] - c - B * mean
        gain = cross @ np.linalg.inv(obs_cov)
        post_mean = mean + gain @ resid
        post_cov = cov - gain @ cross.T

        rts = rts_given_regimes(model, np.zeros(n, dtype=int), ys)
        np.testing.assert_allclose(rts.smoothed_means[:, 0], post_mean, atol=1e-9)
        np.testing.assert_allclose(rts.smoothed_covs[:, 0, 0], np.diag(post_cov), atol=1e-9)
        np.testing.assert_allclose(rts.lag_one_covs[:, 0, 0], np.diag(post_cov, k=1), atol=1e-9)


class TestEnumeratePosterior:
    def test_guard_rejects_large_instances(self, benchmark_model):
        ys = np.zeros((25, 1))
        with pytest.raises(InstanceTooLargeError):
            enumerate_posterior(benchmark_model, ys, max_sequences=10_000)

    def test_single_regime_matches_rts(self, rng):
        model = make_random_model(rng, J=1, m=2, p=1)
        _, _, ys = simulate(model, 6, rng)
        oracle = enumerate_posterior(model, ys)
        rts = rts_given_regimes(model, np.zeros(6, dtype=int), ys)
        assert oracle.log_evidence == pytest.approx(rts.loglik, abs=1e-10)
        np.testing.assert_allclose(oracle.filter_probs, 1.0, atol=1e-12)
        np.testing.assert_allclose(oracle.smooth_probs, 1.0, atol=1e-12)
        np.testing.assert_allclose(oracle.state_means, rts.smoothed_means, atol=1e-10)
        np.testing.assert_allclose(oracle.state_covs, rts.smoothed_covs, atol=1e-10)

    def test_two_route_evidence_identity(self, benchmark_model):
        _, _, ys = simulate(benchmark_model, 8, np.random.default_rng(5))
        oracle = enumerate_posterior(benchmark_model, ys, check_backward_route=True)
        assert np.isfinite(oracle.log_evidence)

    def test_filtering_equals_smoothing_at_terminal(self, benchmark_model):
        _, _, ys = simulate(benchmark_model, 7, np.random.default_rng(6))
        oracle = enumerate_posterior(benchmark_model, ys)
        np.testing.assert_allclose(oracle.filter_probs[-1], oracle.smooth_probs[-1], atol=1e-12)

    def test_probabilities_normalized(self, benchmark_model):
        _, _, ys = simulate(benchmark_model, 6, np.random.default_rng(7))
        oracle = enumerate_posterior(benchmark_model, ys)
        np.testing.assert_allclose(oracle.filter_probs.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(oracle.smooth_probs.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(oracle.pair_probs.sum(axis=(1, 2)), 1.0, atol=1e-12)
        # Pairwise marginals are consistent with single-time marginals.
        np.testing.assert_allclose(oracle.pair_probs.sum(axis=2), oracle.smooth_probs[:-1], atol=1e-12)
        np.testing.assert_allclose(oracle.pair_probs.sum(axis=1), oracle.smooth_probs[1:], atol=1e-12)

    def test_symmetric_regimes_give_symmetric_marginals(self):
        # Two regimes with identical dynamics and a symmetric chain: the
        # posterior cannot distinguish them.
        model = RegimeModel(
            pi=[0.5, 0.5], Q=[[0.5, 0.5], [0.5, 0.5]], d=[[0.2], [0.2]],
            T=[[[0.9]], [[0.9]]], H=[[[0.5]], [[0.5]]], c=[[0.0], [0.0]],
            B=[[[1.0]], [[1.0]]], G=[[[0.7]], [[0.7]]], mu1=[0.0], Sigma1=[[1.0]],
        )
        _, _, ys = simulate(model, 5, np.random.default_rng(8))
        oracle = enumerate_posterior(model, ys)
        np.testing.assert_allclose(oracle.smooth_probs, 0.5, atol=1e-12)

    def test_n_equals_one(self, benchmark_model):
        oracle = enumerate_posterior(benchmark_model, [[0.6]])
        assert oracle.filter_probs.shape == (1, 2)
        np.testing.assert_allclose(oracle.filter_probs, oracle.smooth_probs, atol=1e-14)
        assert oracle.pair_probs is None

    def test_smoothed_state_moments_mixture_identity(self, benchmark_model):
        # Mixture-averaged moments must match a direct weighted sum over
        # sequences computed here by hand.
        _, _, ys = simulate(benchmark_model, 5, np.random.default_rng(9))
        oracle = enumerate_posterior(benchmark_model, ys)
        total_mean = np.zeros((5, 1))
        total_second = np.zeros((5, 1, 1))
        total_w = 0.0
        for idx in range(2 ** 5):
            regimes = np.array([(idx >> (4 - i)) & 1 for i in range(5)])
            rts = rts_given_regimes(benchmark_model, regimes, ys)
            chain = benchmark_model.log_pi[regimes[0]] + np.sum(
                benchmark_model.log_Q[regimes[:-1], regimes[1:]]
            )
            w = np.exp(chain + rts.loglik - oracle.log_evidence)
            total_w += w
            total_mean += w * rts.smoothed_means
            total_second += w * (
                rts.smoothed_covs + np.einsum("ia,ib->iab", rts.smoothed_means, rts.smoothed_means)
            )
        assert total_w == pytest.approx(1.0, abs=1e-10)
        np.testing.assert_allclose(oracle.state_means, total_mean, atol=1e-10)
        np.testing.assert_allclose(
            oracle.state_covs,
            total_second - np.einsum("ia,ib->iab", total_mean, total_mean),
            atol=1e-10,
        )
