"""Tests for the two-filter smoother: artificial density schedule, backward
pass, forward predictive mixture, merges and driver.

Oracle notes:

- single-regime models make every mixture exact, so both merge variants must
  reproduce the Kalman/RTS smoother to near machine precision;
- the two-regime benchmark at n = 10 is checked against the exact
  enumeration oracle (1024 sequences);
- the backward pass at n = 2 is checked against hand-assembled candidate
  probabilities built from the same closed-form integrals it uses, with a
  3.5-sigma multinomial band.
"""

from __future__ import annotations

import numpy as np
import pytest
from conftest import make_benchmark_model, make_random_model, make_single_regime_model

from rbsmc.kalman import (
    backward_info_sequence,
    backward_info_terminal,
    init_predictive_logliks,
    kalman_init,
)
from rbsmc.model import ModelValidationError, RegimeModel, WeightedNormal, simulate
from rbsmc.oracle import enumerate_posterior, rts_given_regimes
from rbsmc.forward import forward_pass
from rbsmc.twofilter import (
    ArtificialDensitySchedule,
    BackwardParticleCloud,
    backward_filter_pass,
    default_gamma_schedule,
    forward_predictive_mixture,
    merge_plain,
    merge_rejuvenated,
    prior_predictive_mixture,
    rejuvenation_mixture,
    smooth_two_filter,
)


def _softmax(v):
    v = np.asarray(v, dtype=float)
    top = v.max()
    w = np.exp(v - top)
    return w / w.sum()


class TestGammaSchedule:
    def test_time_zero_is_prior(self):
        model = make_benchmark_model()
        clouds = forward_pass(model, np.array([[0.2], [0.4], [0.1]]), 50, rng=1)
        schedule = default_gamma_schedule(model, clouds)
        assert schedule.n_times == 3
        assert schedule.n_regimes == 2
        for j in range(2):
            (comp,) = schedule.components[0][j]
            assert comp.log_w == pytest.approx(model.log_pi[j], abs=1e-12)
            np.testing.assert_allclose(comp.mean, model.mu1, atol=1e-12)
            np.testing.assert_allclose(comp.cov, model.Sigma1, atol=1e-12)

    def test_compression_preserves_mixture_moments(self):
        rng = np.random.default_rng(3)
        model = make_random_model(rng, J=3, m=2, p=2)
        _, _, ys = simulate(model, 4, rng)
        clouds = forward_pass(model, ys, 40, rng=4)
        full = default_gamma_schedule(model, clouds, compress=False)
        compressed = default_gamma_schedule(model, clouds, compress=True)
        for i in range(4):
            for j in range(3):
                comps = full.components[i][j]
                (single,) = compressed.components[i][j]
                log_w = np.array([c.log_w for c in comps])
                total = np.logaddexp.reduce(log_w)
                assert single.log_w == pytest.approx(total, abs=1e-12)
                rel = np.exp(log_w - total)
                mean = np.einsum("k,ka->a", rel, np.stack([c.mean for c in comps]))
                cov = np.einsum("k,kab->ab", rel, np.stack([c.cov for c in comps]))
                cov += np.einsum(
                    "k,ka,kb->ab",
                    rel,
                    np.stack([c.mean for c in comps]) - mean,
                    np.stack([c.mean for c in comps]) - mean,
                )
                np.testing.assert_allclose(single.mean, mean, atol=1e-12)
                np.testing.assert_allclose(single.cov, cov, atol=1e-12)

    def test_rejects_unnormalized_weights(self):
        comp = WeightedNormal(log_w=np.log(0.7), mean=np.zeros(1), cov=np.eye(1))
        with pytest.raises(ModelValidationError):
            ArtificialDensitySchedule(components=[[[comp], []]])

    def test_rejects_non_positive_definite_covariance(self):
        bad = WeightedNormal(log_w=0.0, mean=np.zeros(2), cov=np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(ModelValidationError):
            ArtificialDensitySchedule(components=[[[bad]]])

    def test_log_integral_empty_regime_is_minus_inf(self):
        model = make_benchmark_model()
        comp = WeightedNormal(log_w=0.0, mean=np.zeros(1), cov=np.eye(1))
        schedule = ArtificialDensitySchedule(components=[[[comp], []]])
        stat = backward_info_terminal(model, 0, np.array([0.3]))
        assert schedule.log_integral(0, 1, stat) == -np.inf
        assert np.isfinite(schedule.log_integral(0, 0, stat))


class TestBackwardPass:
    def test_single_regime_matches_exact_suffix_statistics(self):
        rng = np.random.default_rng(8)
        model = make_single_regime_model(rng, m=2, p=1)
        _, _, ys = simulate(model, 6, rng)
        clouds = forward_pass(model, ys, 20, rng=2)
        schedule = default_gamma_schedule(model, clouds)
        bwd = backward_filter_pass(model, ys, schedule, 15, rng=3)
        exact = backward_info_sequence(model, np.zeros(6, dtype=int), ys)
        assert len(bwd) == 6
        for t, cloud in enumerate(bwd):
            assert cloud.size == 1
            assert cloud.n_particles == 15
            assert cloud.regimes[0] == 0
            assert cloud.log_w[0] == pytest.approx(0.0, abs=1e-12)
            stat = cloud.stats[0]
            assert stat.log_carry_constant == pytest.approx(
                exact[t].log_carry_constant, rel=1e-12, abs=1e-12
            )
            np.testing.assert_allclose(stat.info_precision, exact[t].info_precision, atol=1e-12)
            np.testing.assert_allclose(stat.info_shift, exact[t].info_shift, atol=1e-12)

    def test_two_step_candidate_law_matches_hand_assembly(self):
        """Empirical (a_0, a_1) joint vs the candidate probabilities assembled
        from the same closed-form integrals the pass uses."""
        model = make_benchmark_model()
        ys = np.array([[0.45], [0.05]])
        clouds = forward_pass(model, ys, 100, rng=5)
        schedule = default_gamma_schedule(model, clouds)

        J = 2
        log_D1 = np.array(
            [schedule.log_integral(1, b, backward_info_terminal(model, b, ys[1])) for b in range(J)]
        )
        log_u = np.empty((J, J))  # [b, a]
        for b in range(J):
            for a in range(J):
                stat0 = backward_info_sequence(model, np.array([a, b]), ys)[0]
                log_u[b, a] = model.log_Q[a, b] + schedule.log_integral(0, a, stat0) - log_D1[b]
        log_v = np.logaddexp.reduce(log_u, axis=1)
        first = _softmax(log_D1 + log_v)
        joint = first[:, None] * np.exp(log_u - log_v[:, None])  # P(a_1 = b, a_0 = a)

        N = 40000
        bwd = backward_filter_pass(model, ys, schedule, N, rng=11)
        counts = np.zeros((J, J))
        cloud0, cloud1 = bwd
        for g in range(cloud0.size):
            b = int(cloud1.regimes[cloud0.parents[g]])
            counts[b, int(cloud0.regimes[g])] += cloud0.counts[g]
        freq = counts / N
        sigma = np.sqrt(np.maximum(joint * (1 - joint), 1e-12) / N)
        assert np.all(np.abs(freq - joint) <= 3.5 * sigma)

    def test_cached_integrals_are_coherent(self):
        rng = np.random.default_rng(21)
        model = make_random_model(rng, J=2, m=1, p=1)
        _, _, ys = simulate(model, 5, rng)
        clouds = forward_pass(model, ys, 60, rng=6)
        schedule = default_gamma_schedule(model, clouds)
        bwd = backward_filter_pass(model, ys, schedule, 40, rng=7)
        for cloud in bwd:
            for g in range(cloud.size):
                recomputed = schedule.log_integral(
                    cloud.time_index, int(cloud.regimes[g]), cloud.stats[g]
                )
                assert cloud.log_gamma_integral[g] == pytest.approx(recomputed, abs=1e-12)

    def test_counts_weights_and_parents_are_consistent(self):
        model = make_benchmark_model()
        rng = np.random.default_rng(9)
        _, _, ys = simulate(model, 7, rng)
        clouds = forward_pass(model, ys, 80, rng=8)
        schedule = default_gamma_schedule(model, clouds)
        bwd = backward_filter_pass(model, ys, schedule, 64, rng=9)
        for t, cloud in enumerate(bwd):
            assert cloud.n_particles == 64
            np.testing.assert_allclose(cloud.log_w, np.log(cloud.counts / 64), atol=1e-14)
            if t == len(bwd) - 1:
                assert np.all(cloud.parents == -1)
            else:
                assert np.all(cloud.parents >= 0)
                assert np.all(cloud.parents < bwd[t + 1].size)

    def test_deterministic_replay(self):
        model = make_benchmark_model()
        rng = np.random.default_rng(10)
        _, _, ys = simulate(model, 6, rng)
        clouds = forward_pass(model, ys, 50, rng=12)
        schedule = default_gamma_schedule(model, clouds)
        first = backward_filter_pass(model, ys, schedule, 30, rng=13)
        second = backward_filter_pass(model, ys, schedule, 30, rng=13)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.regimes, b.regimes)
            np.testing.assert_array_equal(a.counts, b.counts)
            np.testing.assert_array_equal(a.parents, b.parents)

    def test_argument_validation(self):
        model = make_benchmark_model()
        ys = np.array([[0.1], [0.2]])
        clouds = forward_pass(model, ys, 10, rng=1)
        schedule = default_gamma_schedule(model, clouds)
        with pytest.raises(ModelValidationError):
            backward_filter_pass(model, ys, schedule, 0, rng=1)
        with pytest.raises(ModelValidationError):
            backward_filter_pass(model, np.array([[0.1]]), schedule, 5, rng=1)


class TestRejuvenationMixtureLimits:
    def test_huge_state_noise_flattens_the_mixture(self):
        """As the state noise covariance grows the next state forgets the
        current one, so the quadratic coefficients must vanish."""
        model = RegimeModel(
            pi=[1.0],
            Q=[[1.0]],
            d=[[0.3]],
            T=[[[0.5]]],
            H=[[[1000.0]]],
            c=[[0.0]],
            B=[[[1.0]]],
            G=[[[0.5]]],
            mu1=[0.0],
            Sigma1=[[1.0]],
        )
        cloud = BackwardParticleCloud(
            time_index=2,
            regimes=[0],
            parents=[-1],
            counts=[4],
            log_w=[0.0],
            stats=[backward_info_terminal(model, 0, np.array([0.7]))],
            log_gamma_integral=[0.2],
        )
        mix = rejuvenation_mixture(model, cloud)
        assert np.max(np.abs(mix.precision)) <= 1e-6
        assert np.max(np.abs(mix.shift)) <= 1e-2

    def test_forbidden_transitions_remove_terms(self):
        model = RegimeModel(
            pi=[0.5, 0.5],
            Q=[[1.0, 0.0], [0.5, 0.5]],
            d=[[0.0], [0.0]],
            T=[[[0.8]], [[0.8]]],
            H=[[[0.4]], [[0.4]]],
            c=[[0.0], [0.1]],
            B=[[[1.0]], [[1.0]]],
            G=[[[0.3]], [[0.3]]],
            mu1=[0.0],
            Sigma1=[[1.0]],
        )
        cloud = BackwardParticleCloud(
            time_index=3,
            regimes=[1, 1],
            parents=[-1, -1],
            counts=[2, 2],
            log_w=[np.log(0.5), np.log(0.5)],
            stats=[
                backward_info_terminal(model, 1, np.array([0.2])),
                backward_info_terminal(model, 1, np.array([-0.4])),
            ],
            log_gamma_integral=[0.0, 0.0],
        )
        mix = rejuvenation_mixture(model, cloud)
        zs = np.linspace(-1, 1, 5)[:, None]
        # Regime 0 cannot reach regime 1, so every term drops out.
        assert np.all(np.isneginf(mix.log_eval(model, 0, zs)))
        assert np.all(np.isfinite(mix.log_eval(model, 1, zs)))


class TestMerges:
    def test_single_regime_merges_match_rts(self):
        rng = np.random.default_rng(14)
        model = make_single_regime_model(rng, m=2, p=2)
        _, _, ys = simulate(model, 12, rng)
        rts = rts_given_regimes(model, np.zeros(12, dtype=int), ys)
        scale_m = np.max(np.abs(rts.smoothed_means))
        scale_P = np.max(np.abs(rts.smoothed_covs))
        for rejuvenate in (True, False):
            res = smooth_two_filter(model, ys, n_particles=25, rng=15, rejuvenate=rejuvenate)
            assert np.max(np.abs(res.marginals.regime_probs - 1.0)) <= 1e-12
            err_m = np.max(np.abs(res.marginals.state_means - rts.smoothed_means))
            err_P = np.max(np.abs(res.marginals.state_covs - rts.smoothed_covs))
            assert err_m <= 1e-8 * max(scale_m, 1.0)
            assert err_P <= 1e-8 * max(scale_P, 1.0)

    def test_benchmark_rejuvenated_matches_oracle(self):
        model = make_benchmark_model()
        rng = np.random.default_rng(16)
        _, _, ys = simulate(model, 10, rng)
        oracle = enumerate_posterior(model, ys)
        res = smooth_two_filter(model, ys, n_particles=2000, rng=17, rejuvenate=True)
        mae = np.abs(res.marginals.regime_probs - oracle.smooth_probs).mean()
        assert mae <= 0.02
        assert np.abs(res.marginals.state_means - oracle.state_means).mean() <= 0.05

    def test_short_sequence_plain_merge_matches_oracle(self):
        model = make_benchmark_model()
        maes = []
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            _, _, ys = simulate(model, 3, rng)
            oracle = enumerate_posterior(model, ys, with_state_moments=False)
            res = smooth_two_filter(
                model, ys, n_particles=1000, rng=200 + seed, rejuvenate=False
            )
            maes.append(np.abs(res.marginals.regime_probs - oracle.smooth_probs).mean())
        assert np.median(maes) <= 0.03

    def test_plain_and_rejuvenated_agree_with_oracle(self):
        model = make_benchmark_model()
        errs = {True: [], False: []}
        for seed in range(20):
            rng = np.random.default_rng(300 + seed)
            _, _, ys = simulate(model, 6, rng)
            oracle = enumerate_posterior(model, ys, with_state_moments=False)
            for rejuvenate in (True, False):
                res = smooth_two_filter(
                    model, ys, n_particles=2000, rng=400 + seed, rejuvenate=rejuvenate
                )
                errs[rejuvenate].append(
                    np.abs(res.marginals.regime_probs - oracle.smooth_probs).mean()
                )
        assert np.median(errs[True]) <= 0.02
        assert np.median(errs[False]) <= 0.02

    def test_marginals_normalize(self):
        model = make_benchmark_model()
        rng = np.random.default_rng(18)
        _, _, ys = simulate(model, 8, rng)
        for rejuvenate in (True, False):
            res = smooth_two_filter(model, ys, n_particles=150, rng=19, rejuvenate=rejuvenate)
            np.testing.assert_allclose(
                res.marginals.regime_probs.sum(axis=1), np.ones(8), atol=1e-12
            )
            assert np.all(res.marginals.regime_probs >= 0.0)

    def test_plain_support_restricted_rejuvenated_support_full(self):
        """With a single backward trajectory the plain merge can only see the
        regimes that trajectory visits; the rejuvenated merge keeps every
        regime alive through the transition matrix."""
        model = make_benchmark_model()
        rng = np.random.default_rng(22)
        _, _, ys = simulate(model, 5, rng)
        clouds = forward_pass(model, ys, 100, rng=23)
        schedule = default_gamma_schedule(model, clouds)
        bwd = backward_filter_pass(model, ys, schedule, 1, rng=24)
        for t in range(5):
            fwd = (
                prior_predictive_mixture(model)
                if t == 0
                else forward_predictive_mixture(model, clouds[t - 1])
            )
            plain = merge_plain(model, fwd, bwd[t])
            visited = set(bwd[t].regimes.tolist())
            for j in range(2):
                if j not in visited:
                    assert plain.regime_probs[j] == 0.0
            rej = rejuvenation_mixture(model, bwd[t + 1]) if t < 4 else None
            rich = merge_rejuvenated(model, fwd, rej, ys[t])
            assert np.all(rich.regime_probs > 0.0)

    def test_final_time_merge_is_filtered_marginal(self):
        """At the last time the rejuvenated merge has no backward part, so it
        must equal the exact filtered marginal of the predictive mixture."""
        model = make_benchmark_model()
        ys = np.array([[0.35]])
        fwd = prior_predictive_mixture(model)
        merged = merge_rejuvenated(model, fwd, None, ys[0])
        expected_regimes = _softmax(model.log_pi + init_predictive_logliks(model, ys[0]))
        np.testing.assert_allclose(merged.regime_probs, expected_regimes, atol=1e-12)
        stats = [kalman_init(model, j, ys[0]) for j in range(2)]
        mean = sum(expected_regimes[j] * stats[j].mu for j in range(2))
        cov = sum(
            expected_regimes[j] * (stats[j].P + np.outer(stats[j].mu, stats[j].mu))
            for j in range(2)
        ) - np.outer(mean, mean)
        np.testing.assert_allclose(merged.state_mean, mean, atol=1e-12)
        np.testing.assert_allclose(merged.state_cov, cov, atol=1e-12)

    def test_time_mismatch_rejected(self):
        model = make_benchmark_model()
        rng = np.random.default_rng(25)
        _, _, ys = simulate(model, 4, rng)
        clouds = forward_pass(model, ys, 30, rng=26)
        schedule = default_gamma_schedule(model, clouds)
        bwd = backward_filter_pass(model, ys, schedule, 20, rng=27)
        fwd = forward_predictive_mixture(model, clouds[0])
        with pytest.raises(ModelValidationError):
            merge_plain(model, fwd, bwd[2])
        with pytest.raises(ModelValidationError):
            merge_rejuvenated(model, fwd, rejuvenation_mixture(model, bwd[3]), ys[1])


class TestDriver:
    def test_deterministic_replay(self):
        model = make_benchmark_model()
        rng = np.random.default_rng(28)
        _, _, ys = simulate(model, 6, rng)
        a = smooth_two_filter(model, ys, n_particles=120, rng=29)
        b = smooth_two_filter(model, ys, n_particles=120, rng=29)
        np.testing.assert_array_equal(a.marginals.regime_probs, b.marginals.regime_probs)
        np.testing.assert_array_equal(a.marginals.state_means, b.marginals.state_means)
        assert a.log_evidence == b.log_evidence

    def test_single_observation_is_exact_posterior(self):
        """With one observation the rejuvenated merge needs no backward part
        and is exact; the plain merge reports the backward draw's empirical
        frequencies, which are only unbiased (checked at 3.5 sigma)."""
        model = make_benchmark_model()
        ys = np.array([[0.6]])
        expected = _softmax(model.log_pi + init_predictive_logliks(model, ys[0]))
        res = smooth_two_filter(model, ys, n_particles=40, rng=30, rejuvenate=True)
        np.testing.assert_allclose(res.marginals.regime_probs[0], expected, atol=1e-12)

        n_bwd = 20000
        res = smooth_two_filter(
            model, ys, n_particles=40, n_backward=n_bwd, rng=30, rejuvenate=False
        )
        sigma = np.sqrt(expected * (1 - expected) / n_bwd)
        assert np.all(np.abs(res.marginals.regime_probs[0] - expected) <= 3.5 * sigma)

    def test_backward_count_override(self):
        model = make_benchmark_model()
        rng = np.random.default_rng(31)
        _, _, ys = simulate(model, 5, rng)
        res = smooth_two_filter(model, ys, n_particles=80, n_backward=10, rng=32)
        np.testing.assert_allclose(res.marginals.regime_probs.sum(axis=1), np.ones(5), atol=1e-12)

    def test_unknown_scheme_rejected(self):
        model = make_benchmark_model()
        with pytest.raises(ModelValidationError):
            smooth_two_filter(model, np.array([[0.1], [0.2]]), 10, scheme="bogus")
