"""Derivative-free maximization by a covariance-matrix-adapting evolution
strategy.

Compact (mu/mu_w, lambda) implementation: rank-based weighted recombination,
cumulation paths for the step size and the rank-one covariance update, and a
rank-mu covariance update.  Infeasible candidates are resampled a few times
and then repaired by projection onto the feasible set; the projected point is
what gets evaluated and recombined.  The caller's starting point is always
evaluated first, so the returned best value never falls below the objective
at the start.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import ModelValidationError
from .sampling import make_rng


@dataclass(frozen=True)
class OptimizerResult:
    """Best point found, its objective value, and bookkeeping counters."""

    x: np.ndarray
    value: float
    n_evaluations: int
    n_generations: int
    budget_exhausted: bool


def _default_project(x: np.ndarray) -> np.ndarray:
    return x


def maximize(
    objective: Callable[[np.ndarray], float],
    x0: np.ndarray,
    sigma0: float,
    max_evaluations: int,
    rng: int | np.random.Generator = 0,
    population: int = 100,
    parents: int = 20,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
    value_tolerance: float = 0.0,
    patience: int = 0,
    resample_tries: int = 10,
) -> OptimizerResult:
    """Maximize ``objective`` starting from ``x0`` with initial step ``sigma0``.

    ``project`` maps any point to the feasible set (identity for feasible
    input); every evaluated and returned point is feasible.  With positive
    ``patience``, stops early when the best value improves by less than
    ``value_tolerance`` over that many consecutive generations.
    """
    if population < 2 or parents < 1 or parents > population:
        raise ModelValidationError("need population >= 2 and 1 <= parents <= population")
    if not (sigma0 > 0.0):
        raise ModelValidationError("initial step size must be positive")
    if max_evaluations < 1:
        raise ModelValidationError("evaluation budget must be positive")
    rng = make_rng(rng)
    project = project or _default_project

    x0 = project(np.asarray(x0, dtype=float))
    dim = x0.shape[0]
    best_x = x0.copy()
    best_value = float(objective(x0))
    n_evals = 1

    # Rank-based recombination weights and adaptation constants.
    weights = np.log(parents + 0.5) - np.log(np.arange(1, parents + 1))
    weights /= weights.sum()
    mu_eff = 1.0 / np.sum(weights**2)
    c_sigma = (mu_eff + 2.0) / (dim + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, np.sqrt((mu_eff - 1.0) / (dim + 1.0)) - 1.0) + c_sigma
    c_cov_path = (4.0 + mu_eff / dim) / (dim + 4.0 + 2.0 * mu_eff / dim)
    c_rank_one = 2.0 / ((dim + 1.3) ** 2 + mu_eff)
    c_rank_mu = min(
        1.0 - c_rank_one,
        2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((dim + 2.0) ** 2 + mu_eff),
    )
    chi_dim = np.sqrt(dim) * (1.0 - 1.0 / (4.0 * dim) + 1.0 / (21.0 * dim**2))

    mean = x0.copy()
    sigma = float(sigma0)
    cov = np.eye(dim)
    path_sigma = np.zeros(dim)
    path_cov = np.zeros(dim)

    n_gens = 0
    stall = 0
    exhausted = False
    while True:
        if n_evals >= max_evaluations:
            exhausted = True
            break
        eigvals, eigvecs = np.linalg.eigh(0.5 * (cov + cov.T))
        eigvals = np.maximum(eigvals, 1e-20)
        scale = eigvecs * np.sqrt(eigvals)  # C^(1/2)
        inv_scale = eigvecs / np.sqrt(eigvals)  # columns of C^(-1/2)

        batch = min(population, max_evaluations - n_evals)
        steps = np.empty((batch, dim))
        points = np.empty((batch, dim))
        values = np.empty(batch)
        for i in range(batch):
            for _ in range(resample_tries):
                z = rng.standard_normal(dim)
                x = mean + sigma * (scale @ z)
                fixed = project(x)
                if np.array_equal(fixed, x):
                    break
            else:
                x = fixed
            steps[i] = (x - mean) / sigma
            points[i] = x
            values[i] = objective(x)
        n_evals += batch

        top = int(np.argmax(values))
        if values[top] > best_value:
            if values[top] <= best_value + value_tolerance:
                stall += 1
            else:
                stall = 0
            best_value = float(values[top])
            best_x = points[top].copy()
        else:
            stall += 1
        n_gens += 1
        if patience > 0 and stall >= patience:
            break
        if batch < population:
            exhausted = True
            break

        order = np.argsort(-values)[:parents]
        selected = steps[order]
        mean_step = weights @ selected
        mean = mean + sigma * mean_step

        whitened = inv_scale @ (eigvecs.T @ mean_step)  # C^(-1/2) mean_step
        path_sigma = (1.0 - c_sigma) * path_sigma + np.sqrt(
            c_sigma * (2.0 - c_sigma) * mu_eff
        ) * whitened
        norm_ps = np.linalg.norm(path_sigma)
        h_sigma = float(
            norm_ps / np.sqrt(1.0 - (1.0 - c_sigma) ** (2 * (n_gens + 1)))
            < (1.4 + 2.0 / (dim + 1.0)) * chi_dim
        )
        path_cov = (1.0 - c_cov_path) * path_cov + h_sigma * np.sqrt(
            c_cov_path * (2.0 - c_cov_path) * mu_eff
        ) * mean_step

        rank_mu = np.einsum("k,ki,kj->ij", weights, selected, selected)
        cov = (
            (1.0 - c_rank_one - c_rank_mu) * cov
            + c_rank_one
            * (np.outer(path_cov, path_cov) + (1.0 - h_sigma) * c_cov_path * (2.0 - c_cov_path) * cov)
            + c_rank_mu * rank_mu
        )
        sigma *= np.exp((c_sigma / d_sigma) * (norm_ps / chi_dim - 1.0))
        sigma = float(np.clip(sigma, 1e-300, 1e300))

    return OptimizerResult(
        x=best_x,
        value=best_value,
        n_evaluations=n_evals,
        n_generations=n_gens,
        budget_exhausted=exhausted,
    )
