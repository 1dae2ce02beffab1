"""Tests for the covariance-adapting derivative-free maximizer."""

import numpy as np
import pytest

from rbsmc.cmaes import maximize
from rbsmc.model import ModelValidationError


def sphere(target):
    return lambda x: -float(np.sum((x - target) ** 2))


class TestSphereRecovery:
    def test_recovers_optimum_within_tolerance(self):
        rng = np.random.default_rng(5)
        for trial in range(3):
            target = rng.uniform(-1.0, 1.0, size=13)
            res = maximize(
                sphere(target), np.zeros(13), sigma0=0.3, max_evaluations=5000,
                rng=100 + trial, population=20, parents=10,
            )
            assert np.linalg.norm(res.x - target) <= 1e-3
            assert res.n_evaluations <= 5000

    def test_paper_default_population_still_converges(self):
        target = np.random.default_rng(9).uniform(-1.0, 1.0, size=13)
        res = maximize(
            sphere(target), np.zeros(13), sigma0=0.3, max_evaluations=5000,
            rng=0, population=100, parents=20,
        )
        assert res.value >= -1e-4  # ||x - x*||^2 small even at the wide population


class TestContracts:
    def test_start_point_always_evaluated_first(self):
        calls = []

        def probe(x):
            calls.append(x.copy())
            return -float(np.sum(x**2))

        start = np.array([0.3, -0.2])
        res = maximize(probe, start, sigma0=0.1, max_evaluations=1, rng=0, population=10, parents=5)
        assert len(calls) == 1
        assert np.array_equal(calls[0], start)
        assert np.array_equal(res.x, start)
        assert res.budget_exhausted

    def test_never_returns_worse_than_start(self):
        # A deceptive objective: sharply peaked at the start, flat elsewhere.
        start = np.array([1.0, 2.0])

        def spike(x):
            return 10.0 if np.array_equal(x, start) else -1.0

        res = maximize(spike, start, sigma0=0.5, max_evaluations=500, rng=1, population=10, parents=5)
        assert res.value == 10.0
        assert np.array_equal(res.x, start)

    def test_projection_keeps_iterates_feasible(self):
        # Feasible set: x >= 0.25 componentwise; unconstrained optimum at 0.
        def project(x):
            return np.maximum(x, 0.25)

        res = maximize(
            sphere(np.zeros(4)), np.full(4, 1.0), sigma0=0.3, max_evaluations=3000,
            rng=3, population=20, parents=10, project=project,
        )
        assert np.all(res.x >= 0.25 - 1e-15)
        assert np.max(np.abs(res.x - 0.25)) <= 1e-2

    def test_seeded_determinism(self):
        target = np.array([0.4, -0.1, 0.2])
        a = maximize(sphere(target), np.zeros(3), 0.2, 800, rng=7, population=12, parents=6)
        b = maximize(sphere(target), np.zeros(3), 0.2, 800, rng=7, population=12, parents=6)
        assert np.array_equal(a.x, b.x)
        assert a.value == b.value
        assert a.n_evaluations == b.n_evaluations

    def test_patience_stops_early_on_stagnation(self):
        res = maximize(
            lambda x: 0.0, np.zeros(5), 0.2, 100_000, rng=0, population=10, parents=5,
            value_tolerance=1e-12, patience=3,
        )
        assert not res.budget_exhausted
        assert res.n_evaluations < 100_000
        assert res.n_generations <= 4

    def test_rejects_bad_arguments(self):
        with pytest.raises(ModelValidationError):
            maximize(lambda x: 0.0, np.zeros(2), sigma0=0.0, max_evaluations=10)
        with pytest.raises(ModelValidationError):
            maximize(lambda x: 0.0, np.zeros(2), sigma0=0.1, max_evaluations=0)
        with pytest.raises(ModelValidationError):
            maximize(lambda x: 0.0, np.zeros(2), 0.1, 10, population=10, parents=11)
        with pytest.raises(ModelValidationError):
            maximize(lambda x: 0.0, np.zeros(2), 0.1, 10, population=1, parents=1)
