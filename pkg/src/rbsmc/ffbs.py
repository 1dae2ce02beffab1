"""Backward-simulation smoothers on top of the forward particle filter.

Two samplers produce regime trajectories approximately distributed according
to the joint smoothing law:

- :func:`ffbs_sample_plain` re-picks, at every backward step, one of the
  forward particles at that time, so sampled regimes stay inside the forward
  support.
- :func:`ffbs_sample_rejuvenated` re-opens the regime choice at every step:
  each forward particle at the *previous* time is extended by every regime
  with a one-step Kalman update, the ancestor index is summed out, and the
  fresh regime is drawn from the resulting mixture.  Sampled regimes are not
  restricted to the forward support.

Both samplers carry a quadratic suffix statistic (:class:`~rbsmc.kalman.FfbsBackwardStat`)
per trajectory.  The statistic depends only on the regimes sampled so far
(the suffix), so trajectories that share a suffix share one statistic and one
candidate-weight table; the sweep groups trajectories accordingly, which
bounds per-step work by ``min(n_traj, J**steps_remaining)`` tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .forward import OffspringTable, ParticleCloud, extend_all_offspring, forward_pass
from .kalman import (
    FfbsBackwardStat,
    ffbs_fold_observation,
    ffbs_suffix_part,
    ffbs_terminal_stat,
    init_predictive_logliks,
    kalman_init,
    log_normal_quad_expectation_batch,
)
from .model import ModelValidationError, RegimeModel
from .oracle import rts_given_regimes
from .sampling import categorical_from_logw, make_rng

__all__ = [
    "BackwardTrajectory",
    "SmoothingMarginals",
    "FfbsResult",
    "ffbs_sample_plain",
    "ffbs_sample_rejuvenated",
    "rejuvenation_logweights",
    "trajectories_matrix",
    "marginal_estimate",
    "smooth_ffbs",
]

MOMENT_CHOICES = ("filtered", "predictive")


@dataclass(frozen=True)
class BackwardTrajectory:
    """One sampled regime sequence with its per-time suffix statistics.

    ``stats[i]`` summarizes the observations and sampled regimes from time
    ``i`` onward; statistics are shared (by reference) between trajectories
    whose sampled suffixes coincide.  ``sampling_laws[i, j]`` is the
    probability that the backward sweep assigned to regime ``j`` when it
    drew this trajectory's ``regimes[i]`` (conditional on the sampled
    suffix), which supports a Rao-Blackwellized marginal estimator.
    """

    regimes: np.ndarray
    stats: list[FfbsBackwardStat]
    sampling_laws: np.ndarray | None = None

    def __len__(self) -> int:
        return self.regimes.shape[0]


@dataclass(frozen=True)
class SmoothingMarginals:
    """Per-time marginal smoothing estimates.

    ``regime_probs[i, j]`` estimates ``P(a_i = j | y_{1:n})``.  State moments
    are mixtures of regime-conditional smoother outputs over the sampled
    trajectories and are ``None`` unless requested.
    """

    regime_probs: np.ndarray
    state_means: np.ndarray | None = None
    state_covs: np.ndarray | None = None


@dataclass(frozen=True)
class FfbsResult:
    trajectories: list[BackwardTrajectory]
    marginals: SmoothingMarginals
    log_evidence: float


def trajectories_matrix(trajectories: Sequence[BackwardTrajectory]) -> np.ndarray:
    """Stack sampled regime sequences into an ``(n_traj, n)`` integer matrix."""
    if not trajectories:
        raise ModelValidationError("need at least one trajectory")
    return np.stack([traj.regimes for traj in trajectories])


def _value_groups(sampled: np.ndarray, n_regimes: int) -> list[tuple[int, np.ndarray]]:
    """Pairs ``(regime value, positions with that value)`` in ascending value order."""
    return [(j, np.nonzero(sampled == j)[0]) for j in range(n_regimes) if np.any(sampled == j)]


def _sample_backward(
    model: RegimeModel,
    ys: np.ndarray,
    n_trajectories: int,
    rng: np.random.Generator,
    root_candidates: Callable[[], tuple[np.ndarray, np.ndarray]],
    step_candidates: Callable[[int, np.ndarray, np.ndarray, int], tuple[np.ndarray, np.ndarray]],
) -> list[BackwardTrajectory]:
    """Shared sweep: sample the last time from ``root_candidates`` and walk back.

    Both candidate callbacks return ``(log_weights, regime_values)`` over the
    step's candidates; ``step_candidates(t, Omega, lam, a_next)`` receives the
    suffix coefficients already pushed back to time ``t``.
    """
    n = ys.shape[0]
    J = model.n_regimes
    regimes = np.empty((n_trajectories, n), dtype=np.int64)
    laws = np.empty((n_trajectories, n, J))
    group_of = np.empty((n_trajectories, n), dtype=np.int64)
    step_stats: list[list[FfbsBackwardStat]] = [[] for _ in range(n)]
    step_regime: list[list[int]] = [[] for _ in range(n)]

    def regime_law(log_w: np.ndarray, values: np.ndarray) -> np.ndarray:
        probs = np.exp(log_w - logsumexp(log_w))
        agg = np.zeros(J)
        np.add.at(agg, values, probs)
        return agg

    log_w, values = root_candidates()
    sampled = values[categorical_from_logw(log_w, n_trajectories, rng, time_index=n - 1)]
    regimes[:, n - 1] = sampled
    laws[:, n - 1, :] = regime_law(log_w, values)[None, :]
    for value, members in _value_groups(sampled, model.n_regimes):
        gid = len(step_stats[n - 1])
        step_stats[n - 1].append(ffbs_terminal_stat(model, value, ys[n - 1]))
        step_regime[n - 1].append(value)
        group_of[members, n - 1] = gid

    for t in range(n - 2, -1, -1):
        for gid_next, stat_next in enumerate(step_stats[t + 1]):
            members = np.nonzero(group_of[:, t + 1] == gid_next)[0]
            a_next = step_regime[t + 1][gid_next]
            Omega, lam = ffbs_suffix_part(model, stat_next, a_next)
            log_w, values = step_candidates(t, Omega, lam, a_next)
            sampled = values[categorical_from_logw(log_w, members.size, rng, time_index=t)]
            regimes[members, t] = sampled
            laws[members, t, :] = regime_law(log_w, values)[None, :]
            for value, positions in _value_groups(sampled, model.n_regimes):
                gid = len(step_stats[t])
                step_stats[t].append(ffbs_fold_observation(model, Omega, lam, value, ys[t]))
                step_regime[t].append(value)
                group_of[members[positions], t] = gid

    return [
        BackwardTrajectory(
            regimes=regimes[r].copy(),
            stats=[step_stats[t][group_of[r, t]] for t in range(n)],
            sampling_laws=laws[r].copy(),
        )
        for r in range(n_trajectories)
    ]


def _check_sampler_args(
    clouds: Sequence[ParticleCloud], ys: np.ndarray, n_trajectories: int
) -> np.ndarray:
    ys = np.asarray(ys, dtype=float)
    if n_trajectories < 1:
        raise ModelValidationError("trajectory count must be at least 1")
    if len(clouds) != ys.shape[0]:
        raise ModelValidationError(
            f"got {len(clouds)} particle clouds for {ys.shape[0]} observations"
        )
    return ys


def ffbs_sample_plain(
    model: RegimeModel,
    clouds: Sequence[ParticleCloud],
    ys: np.ndarray,
    n_trajectories: int,
    rng: int | np.random.Generator | None,
) -> list[BackwardTrajectory]:
    """Backward simulation restricted to the forward particles.

    The last regime is drawn from the final filter weights; earlier steps
    reweight each forward particle by its filter weight, the transition into
    the sampled suffix, and the collapsed compatibility of its filtered state
    moments with the suffix statistics.
    """
    ys = _check_sampler_args(clouds, ys, n_trajectories)
    rng = make_rng(rng)

    def root() -> tuple[np.ndarray, np.ndarray]:
        final = clouds[-1]
        return final.log_w, final.regimes

    def step(t: int, Omega: np.ndarray, lam: np.ndarray, a_next: int) -> tuple[np.ndarray, np.ndarray]:
        cloud = clouds[t]
        log_w = (
            cloud.log_w
            + model.log_Q[cloud.regimes, a_next]
            + log_normal_quad_expectation_batch(cloud.mu, cloud.P, Omega, lam)
        )
        return log_w, cloud.regimes

    return _sample_backward(model, ys, n_trajectories, rng, root, step)


def rejuvenation_logweights(
    model: RegimeModel,
    table: OffspringTable,
    Omega: np.ndarray,
    lam: np.ndarray,
    a_next: int | None,
    moments: str = "filtered",
) -> np.ndarray:
    """Joint ``(ancestor, regime)`` log weights of one rejuvenated backward step.

    Entry ``[k, j]`` combines the ancestor's one-step extension weight (its
    filter weight, the transition into ``j`` and the predictive observation
    density), the transition from ``j`` into the sampled suffix, and the
    collapsed suffix compatibility of the extended state moments.  With
    ``moments="filtered"`` the collapse uses the measurement-updated moments
    (the exact conditional law of the state); ``"predictive"`` evaluates the
    pre-update moments instead, kept for comparison with the cheaper but
    biased variant.
    """
    if moments not in MOMENT_CHOICES:
        raise ModelValidationError(f"unknown moments choice {moments!r}; expected one of {MOMENT_CHOICES}")
    if moments == "filtered":
        collapse = log_normal_quad_expectation_batch(table.mu_filt, table.P_filt, Omega, lam)
    else:
        collapse = log_normal_quad_expectation_batch(table.mu_pred, table.P_pred, Omega, lam)
    log_w = table.log_w_tilde + collapse
    if a_next is not None:
        log_w = log_w + model.log_Q[:, a_next][None, :]
    return log_w


def ffbs_sample_rejuvenated(
    model: RegimeModel,
    clouds: Sequence[ParticleCloud],
    ys: np.ndarray,
    n_trajectories: int,
    rng: int | np.random.Generator | None,
    moments: str = "filtered",
) -> list[BackwardTrajectory]:
    """Backward simulation with per-step regime rejuvenation.

    Every step extends the forward cloud of the *previous* time by all
    regimes, marginalizes the ancestor index in the log domain, and samples
    the fresh regime from the resulting ``J``-point law, so the output
    support is not limited to the forward particles.  The first time uses
    the regime prior and the exact initial measurement update in place of an
    ancestor cloud; the last time carries no suffix term.
    """
    ys = _check_sampler_args(clouds, ys, n_trajectories)
    if moments not in MOMENT_CHOICES:
        raise ModelValidationError(f"unknown moments choice {moments!r}; expected one of {MOMENT_CHOICES}")
    rng = make_rng(rng)
    n = ys.shape[0]
    J = model.n_regimes
    values = np.arange(J, dtype=np.int64)

    # Offspring tables reused across trajectories: step t extends cloud t-1.
    tables: dict[int, OffspringTable] = {
        t: extend_all_offspring(model, clouds[t - 1], ys[t]) for t in range(1, n)
    }
    init_base = model.log_pi + init_predictive_logliks(model, ys[0])
    init_stats = [kalman_init(model, j, ys[0]) for j in range(J)]
    init_mu = np.stack([stat.mu for stat in init_stats])
    init_P = np.stack([stat.P for stat in init_stats])

    def root() -> tuple[np.ndarray, np.ndarray]:
        if n == 1:
            return init_base, values
        zeros = np.zeros((model.state_dim, model.state_dim))
        log_w = rejuvenation_logweights(model, tables[n - 1], zeros, np.zeros(model.state_dim), None, moments)
        return logsumexp(log_w, axis=0), values

    def step(t: int, Omega: np.ndarray, lam: np.ndarray, a_next: int) -> tuple[np.ndarray, np.ndarray]:
        if t == 0:
            if moments == "filtered":
                collapse = log_normal_quad_expectation_batch(init_mu, init_P, Omega, lam)
            else:
                collapse = np.full(
                    J, log_normal_quad_expectation_batch(model.mu1[None], model.Sigma1[None], Omega, lam)[0]
                )
            return init_base + model.log_Q[:, a_next] + collapse, values
        log_w = rejuvenation_logweights(model, tables[t], Omega, lam, a_next, moments)
        return logsumexp(log_w, axis=0), values

    return _sample_backward(model, ys, n_trajectories, rng, root, step)


ESTIMATOR_CHOICES = ("frequency", "rao-blackwell")


def marginal_estimate(
    trajectories: Sequence[BackwardTrajectory],
    n_regimes: int,
    model: RegimeModel | None = None,
    ys: np.ndarray | None = None,
    estimator: str = "frequency",
) -> SmoothingMarginals:
    """Empirical smoothing marginals of a trajectory sample.

    With ``estimator="frequency"`` regime probabilities are plain
    frequencies of the sampled regimes.  ``"rao-blackwell"`` averages the
    per-step sampling laws recorded during the backward sweep instead of the
    sampled indicators — same expectation, never larger variance (it removes
    the final categorical draw's noise at each time).  When ``model`` and
    ``ys`` are given, state moments are added: each distinct regime sequence
    is smoothed exactly (regime-conditional forward-backward pass) and the
    per-time Gaussian moments are mixed with the sequence frequencies.
    """
    if estimator not in ESTIMATOR_CHOICES:
        raise ModelValidationError(
            f"unknown estimator {estimator!r}; expected one of {ESTIMATOR_CHOICES}"
        )
    trajs = trajectories_matrix(trajectories)
    n_traj, n = trajs.shape
    if estimator == "rao-blackwell":
        if any(traj.sampling_laws is None for traj in trajectories):
            raise ModelValidationError(
                "rao-blackwell estimator needs trajectories with recorded sampling laws"
            )
        probs = np.mean([traj.sampling_laws for traj in trajectories], axis=0)
    else:
        probs = np.stack([(trajs == j).mean(axis=0) for j in range(n_regimes)], axis=1)
    state_means = state_covs = None
    if model is not None and ys is not None:
        ys = np.asarray(ys, dtype=float)
        unique, counts = np.unique(trajs, axis=0, return_counts=True)
        weights = counts / n_traj
        m = model.state_dim
        state_means = np.zeros((n, m))
        second = np.zeros((n, m, m))
        for sequence, weight in zip(unique, weights):
            smoothed = rts_given_regimes(model, sequence, ys)
            state_means += weight * smoothed.smoothed_means
            second += weight * (
                smoothed.smoothed_covs
                + np.einsum("ia,ib->iab", smoothed.smoothed_means, smoothed.smoothed_means)
            )
        state_covs = second - np.einsum("ia,ib->iab", state_means, state_means)
    return SmoothingMarginals(regime_probs=probs, state_means=state_means, state_covs=state_covs)


def smooth_ffbs(
    model: RegimeModel,
    ys: np.ndarray,
    n_particles: int,
    n_trajectories: int,
    scheme: str = "KL-OS",
    rng: int | np.random.Generator | None = None,
    rejuvenate: bool = True,
    moments: str = "filtered",
    with_state_moments: bool = False,
    estimator: str = "frequency",
) -> FfbsResult:
    """Forward filter plus backward simulation in one call."""
    rng = make_rng(rng)
    clouds = forward_pass(model, ys, n_particles, scheme=scheme, rng=rng)
    if rejuvenate:
        trajectories = ffbs_sample_rejuvenated(model, clouds, ys, n_trajectories, rng, moments=moments)
    else:
        trajectories = ffbs_sample_plain(model, clouds, ys, n_trajectories, rng)
    marginals = marginal_estimate(
        trajectories,
        model.n_regimes,
        model=model if with_state_moments else None,
        ys=ys if with_state_moments else None,
        estimator=estimator,
    )
    return FfbsResult(
        trajectories=trajectories,
        marginals=marginals,
        log_evidence=clouds[-1].log_norm_const,
    )
