"""Shared fixtures: the two-regime benchmark model and random model factories."""

from __future__ import annotations

import numpy as np
import pytest

from rbsmc.model import RegimeModel


def make_benchmark_model() -> RegimeModel:
    """Two-regime scalar benchmark: distinct intercepts, sticky chain."""
    return RegimeModel(
        pi=[0.5, 0.5],
        Q=[[0.99, 0.01], [0.03, 0.97]],
        d=[[0.5], [0.0]],
        T=[[[1.0]], [[1.0]]],
        H=[[[np.sqrt(0.1)]], [[np.sqrt(0.1)]]],
        c=[[0.1], [0.0]],
        B=[[[1.0]], [[1.0]]],
        G=[[[np.sqrt(0.3)]], [[np.sqrt(0.1)]]],
        mu1=[0.0],
        Sigma1=[[1.0]],
    )


def make_random_model(
    rng: np.random.Generator, J: int = 2, m: int = 2, p: int = 1, stable: bool = True
) -> RegimeModel:
    """Random well-conditioned model for property tests."""

    def spd(k: int) -> np.ndarray:
        root = rng.normal(size=(k, k))
        return root @ root.T + 0.5 * k * np.eye(k)

    T = rng.normal(size=(J, m, m))
    if stable:
        T *= 0.4
    H = np.stack([np.linalg.cholesky(spd(m)) for _ in range(J)])
    G = np.stack([np.linalg.cholesky(spd(p)) for _ in range(J)])
    Q = rng.uniform(0.2, 1.0, size=(J, J))
    Q /= Q.sum(axis=1, keepdims=True)
    pi = rng.uniform(0.2, 1.0, size=J)
    pi /= pi.sum()
    return RegimeModel(
        pi=pi,
        Q=Q,
        d=rng.normal(size=(J, m)),
        T=T,
        H=H,
        c=rng.normal(size=(J, p)),
        B=rng.normal(size=(J, p, m)),
        G=G,
        mu1=rng.normal(size=m),
        Sigma1=spd(m),
    )


def make_single_regime_model(rng: np.random.Generator, m: int = 2, p: int = 2) -> RegimeModel:
    return make_random_model(rng, J=1, m=m, p=p)


@pytest.fixture
def benchmark_model() -> RegimeModel:
    return make_benchmark_model()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20260814)
