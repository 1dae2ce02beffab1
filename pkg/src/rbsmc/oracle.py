"""Exact posterior by regime-sequence enumeration, for small instances.

``enumerate_posterior`` expands all ``J^n`` regime sequences level by level,
carrying for every prefix its exact log joint ``log p(a_{1:i}, y_{1:i})``
and the conditional Kalman moments.  Filtering marginals fall out per level,
smoothing marginals from the final level, and exact state moments from a
regime-conditional RTS smoother run per sequence.  Guarded by an explicit
sequence-count cap, since the cost is exponential by design.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .kalman import (
    backward_info_sequence,
    gaussian_backward_integral,
    init_predictive_logliks,
    kalman_init,
    kalman_predict_update,
)
from .model import ModelValidationError, NumericalError, RegimeModel, chol_with_jitter, symmetrize


class InstanceTooLargeError(ModelValidationError):
    """Requested enumeration exceeds the sequence-count guard."""


@dataclass
class RtsResult:
    """Regime-conditional smoother output for one fixed regime sequence.

    ``lag_one_covs[i] = Cov(z_i, z_{i+1} | y_{1:n})`` for ``i < n-1``.
    """

    loglik: float
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    smoothed_means: np.ndarray
    smoothed_covs: np.ndarray
    lag_one_covs: np.ndarray


@dataclass
class OracleResult:
    log_evidence: float
    filter_probs: np.ndarray
    smooth_probs: np.ndarray
    state_means: np.ndarray | None
    state_covs: np.ndarray | None
    pair_probs: np.ndarray | None


def rts_given_regimes(model: RegimeModel, regimes: np.ndarray, ys: np.ndarray) -> RtsResult:
    """Kalman filter + RTS smoother conditional on a fixed regime sequence."""
    regimes = np.asarray(regimes, dtype=int)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n, m = regimes.shape[0], model.state_dim
    filt_mu = np.empty((n, m))
    filt_P = np.empty((n, m, m))
    pred_mu = np.empty((n, m))
    pred_P = np.empty((n, m, m))

    loglik = float(init_predictive_logliks(model, ys[0])[regimes[0]])
    stat = kalman_init(model, int(regimes[0]), ys[0])
    filt_mu[0], filt_P[0] = stat.mu, stat.P
    pred_mu[0], pred_P[0] = model.mu1, model.Sigma1
    for i in range(1, n):
        a = int(regimes[i])
        pred_mu[i] = model.d[a] + model.T[a] @ stat.mu
        pred_P[i] = symmetrize(model.T[a] @ stat.P @ model.T[a].T + model.Hbar[a])
        stat, step_loglik = kalman_predict_update(model, stat, a, ys[i])
        loglik += step_loglik
        filt_mu[i], filt_P[i] = stat.mu, stat.P

    smooth_mu = np.empty_like(filt_mu)
    smooth_P = np.empty_like(filt_P)
    lag_one = np.empty((max(n - 1, 0), m, m))
    smooth_mu[n - 1], smooth_P[n - 1] = filt_mu[n - 1], filt_P[n - 1]
    for i in range(n - 2, -1, -1):
        a_next = int(regimes[i + 1])
        chol = chol_with_jitter(pred_P[i + 1], label="predicted covariance")
        # Gain C = P_f T' P_pred^{-1} via two triangular solves.
        rhs = model.T[a_next] @ filt_P[i]
        gain = solve_triangular(chol.T, solve_triangular(chol, rhs, lower=True), lower=False).T
        smooth_mu[i] = filt_mu[i] + gain @ (smooth_mu[i + 1] - pred_mu[i + 1])
        smooth_P[i] = symmetrize(filt_P[i] + gain @ (smooth_P[i + 1] - pred_P[i + 1]) @ gain.T)
        lag_one[i] = gain @ smooth_P[i + 1]
    return RtsResult(
        loglik=loglik,
        filtered_means=filt_mu,
        filtered_covs=filt_P,
        smoothed_means=smooth_mu,
        smoothed_covs=smooth_P,
        lag_one_covs=lag_one,
    )


def _pairwise_logsumexp(values: np.ndarray) -> float:
    """Deterministic tree reduction of log values (order independent of chunking)."""
    vals = np.asarray(values, dtype=float).reshape(-1)
    if vals.size == 0:
        return float("-inf")
    while vals.size > 1:
        half = vals.size // 2
        paired = np.logaddexp(vals[:half], vals[half : 2 * half])
        if vals.size % 2:
            paired = np.concatenate([paired, vals[-1:]])
        vals = paired
    return float(vals[0])


def enumerate_posterior(
    model: RegimeModel,
    ys: np.ndarray,
    max_sequences: int = 1_000_000,
    with_state_moments: bool = True,
    state_moment_cap: int = 32_768,
    check_backward_route: bool = False,
) -> OracleResult:
    """Exact filtering/smoothing marginals by full regime-sequence enumeration.

    Raises :class:`InstanceTooLargeError` when ``J^n`` exceeds
    ``max_sequences``.  State moments are computed when the sequence count
    also fits under ``state_moment_cap``.  With ``check_backward_route`` the
    log evidence is recomputed through the backward information recursion and
    compared against the forward route (assertion at 1e-10 log scale).
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n = ys.shape[0]
    J, m = model.n_regimes, model.state_dim
    if J ** n > max_sequences:
        raise InstanceTooLargeError(
            f"enumeration over {J}^{n} regime sequences exceeds the cap of {max_sequences}"
        )

    # Level 1: one branch per first regime.
    init_stats = [kalman_init(model, j, ys[0]) for j in range(J)]
    log_w = model.log_pi + init_predictive_logliks(model, ys[0])
    mu = np.stack([stat.mu for stat in init_stats])
    P = np.stack([stat.P for stat in init_stats])
    filter_probs = np.empty((n, J))
    filter_probs[0] = _normalize_by_last_regime(log_w, J)

    from .forward import observation_update_batch, predict_moments_per_regime

    for i in range(1, n):
        S = log_w.shape[0]
        mu_pred, P_pred = predict_moments_per_regime(model, mu, P)
        log_obs, mu_filt, P_filt = observation_update_batch(model, ys[i], mu_pred, P_pred, i)
        # Expand prefixes in lexicographic order: new index = old * J + j, so
        # the last regime is always the fastest-moving digit.
        prev_last = np.arange(S) % J
        log_w = (log_w[:, None] + model.log_Q[prev_last] + log_obs).reshape(S * J)
        mu = mu_filt.reshape(S * J, m)
        P = P_filt.reshape(S * J, m, m)
        filter_probs[i] = _normalize_by_last_regime(log_w, J)

    log_evidence = _pairwise_logsumexp(log_w)
    if not np.isfinite(log_evidence):
        raise NumericalError("all regime sequences have zero posterior mass", time_index=n - 1)
    log_post = log_w - log_evidence
    post = np.exp(log_post)

    S = log_w.shape[0]
    digits = _sequence_digits(S, J, n)
    smooth_probs = np.zeros((n, J))
    for i in range(n):
        np.add.at(smooth_probs[i], digits[:, i], post)
    pair_probs = np.zeros((n - 1, J, J)) if n > 1 else None
    if n > 1:
        for i in range(n - 1):
            np.add.at(pair_probs[i], (digits[:, i], digits[:, i + 1]), post)

    state_means = state_covs = None
    if with_state_moments and S <= state_moment_cap:
        state_means = np.zeros((n, m))
        second = np.zeros((n, m, m))
        for s in range(S):
            if post[s] <= 0.0:
                continue
            rts = rts_given_regimes(model, digits[s], ys)
            state_means += post[s] * rts.smoothed_means
            second += post[s] * (
                rts.smoothed_covs + np.einsum("ia,ib->iab", rts.smoothed_means, rts.smoothed_means)
            )
        state_covs = symmetrize(second - np.einsum("ia,ib->iab", state_means, state_means))

    if check_backward_route:
        alt = np.empty(S)
        for s in range(S):
            regs = digits[s]
            chain = model.log_pi[regs[0]] + float(np.sum(model.log_Q[regs[:-1], regs[1:]]))
            stat = backward_info_sequence(model, regs, ys)[0]
            alt[s] = chain + gaussian_backward_integral(model.mu1, model.Sigma1, stat)
        alt_evidence = _pairwise_logsumexp(alt)
        if abs(alt_evidence - log_evidence) > 1e-10 * max(1.0, abs(log_evidence)):
            raise AssertionError(
                f"evidence routes disagree: forward {log_evidence!r} vs backward {alt_evidence!r}"
            )

    return OracleResult(
        log_evidence=log_evidence,
        filter_probs=filter_probs,
        smooth_probs=smooth_probs,
        state_means=state_means,
        state_covs=state_covs,
        pair_probs=pair_probs,
    )


def _normalize_by_last_regime(log_w: np.ndarray, J: int) -> np.ndarray:
    """Posterior over the last regime of the level, from prefix log joints.

    Level arrays are ordered prefix-major, regime-minor, so the last regime
    is the fastest-moving index.
    """
    top = np.max(log_w)
    if not np.isfinite(top):
        raise NumericalError("zero filtering mass at an enumeration level")
    totals = np.exp(log_w - top).reshape(-1, J).sum(axis=0)
    return totals / totals.sum()


def _sequence_digits(S: int, J: int, n: int) -> np.ndarray:
    """Regime digits (S, n) of lexicographically ordered sequence indices."""
    idx = np.arange(S)
    digits = np.empty((S, n), dtype=np.int64)
    for i in range(n):
        digits[:, i] = (idx // (J ** (n - 1 - i))) % J
    return digits
