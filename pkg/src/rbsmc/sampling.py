"""Seeding and categorical sampling helpers.

All stochastic entry points accept either an integer seed or a ready
``numpy.random.Generator``.  Seeds go through ``SeedSequence`` and a
counter-based bit generator so that per-run/per-method streams can be
spawned reproducibly and independently.
"""

from __future__ import annotations

import numpy as np

from .model import NumericalError


def make_rng(seed: int | np.random.Generator | np.random.SeedSequence | None) -> np.random.Generator:
    """Build a ``Generator`` from a seed, pass one through unchanged."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def spawn_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """Independent child generators, stable in ``(seed, index)``."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def normalize_log_weights(log_w: np.ndarray, time_index: int | None = None) -> tuple[np.ndarray, float]:
    """Return ``(log_w - logsumexp(log_w), logsumexp(log_w))``; error if all zero."""
    log_w = np.asarray(log_w, dtype=float)
    top = np.max(log_w) if log_w.size else -np.inf
    if not np.isfinite(top):
        raise NumericalError("all weights are zero or invalid", time_index=time_index)
    total = top + np.log(np.sum(np.exp(log_w - top)))
    return log_w - total, float(total)


def categorical_from_logw(
    log_w: np.ndarray, size: int, rng: np.random.Generator, time_index: int | None = None
) -> np.ndarray:
    """Inverse-CDF draws from the normalized exp of ``log_w`` (any shape, flattened in C order).

    The fixed flattening order plus inverse-CDF sampling makes draws
    reproducible across platforms for a given generator state.
    """
    log_w = np.asarray(log_w, dtype=float).reshape(-1)
    norm, _ = normalize_log_weights(log_w, time_index=time_index)
    cdf = np.cumsum(np.exp(norm))
    u = rng.random(size)
    idx = np.searchsorted(cdf, u * cdf[-1], side="right")
    return np.clip(idx, 0, log_w.shape[0] - 1)
