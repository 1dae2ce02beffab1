"""Kalman recursions conditional on a regime value or regime sequence.

Three families live here:

- the forward filter step (predict + Joseph-form update) used by the
  particle filter and the exact enumerator;
- the backward *information-form* recursion for the log conditional
  likelihood of a suffix of observations given the current state,
  ``log p(y_{i:n} | a_{i:n}, z_i) = -(c + z'Pinv z)/2 + z'nu``,
  carried as :class:`BackwardInfoStat` with exact constants;
- the backward *quadratic* recursion used by trajectory samplers,
  carried as :class:`FfbsBackwardStat`.

Information matrices are never inverted on their own (the terminal one is
rank deficient whenever the state dimension exceeds the observation
dimension); they only ever appear added to a positive definite matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .model import (
    LOG_2PI,
    NumericalError,
    RegimeModel,
    chol_with_jitter,
    chol_with_jitter_batch,
    symmetrize,
)


@dataclass(frozen=True)
class KalmanStat:
    """Filtered state moments ``(mu, P)`` at one time step."""

    mu: np.ndarray
    P: np.ndarray


@dataclass(frozen=True)
class BackwardInfoStat:
    """Information-form suffix likelihood ``exp(-(c + z'Pinv z)/2 + z'nu)``.

    ``log_carry_constant`` is the exact constant ``c`` (it includes every
    ``2 pi`` and determinant term), ``info_precision`` the symmetric
    positive *semi*-definite matrix, ``info_shift`` the linear coefficient.
    """

    log_carry_constant: float
    info_precision: np.ndarray
    info_shift: np.ndarray


@dataclass(frozen=True)
class FfbsBackwardStat:
    """Quadratic suffix statistics for backward trajectory sampling.

    ``Omega``/``lam`` summarize the suffix strictly after time i combined
    with the time-i regime through the state transition; ``Omega_hat``/
    ``lam_hat`` additionally fold in the time-i observation.  The sampled
    density contribution of a filtered particle ``N(mu, P)`` against
    ``(Omega, lam)`` is :func:`log_normal_quad_expectation`.
    """

    Omega: np.ndarray
    lam: np.ndarray
    Omega_hat: np.ndarray
    lam_hat: np.ndarray


def init_predictive_logliks(model: RegimeModel, y1: np.ndarray) -> np.ndarray:
    """Per-regime log density of the first observation, ``log N(y1; c_j + B_j mu1, B_j Sigma1 B_j' + Gbar_j)``."""
    y1 = np.asarray(y1, dtype=float)
    J, p = model.n_regimes, model.obs_dim
    out = np.empty(J)
    for j in range(J):
        mean = model.c[j] + model.B[j] @ model.mu1
        cov = model.B[j] @ model.Sigma1 @ model.B[j].T + model.Gbar[j]
        chol = chol_with_jitter(cov, label="initial innovation covariance")
        half = solve_triangular(chol, y1 - mean, lower=True)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        out[j] = -0.5 * (p * LOG_2PI + logdet + float(half @ half))
    return out


def kalman_init(model: RegimeModel, a1: int, y1: np.ndarray) -> KalmanStat:
    """Filtered moments of ``z_1`` given regime ``a1`` and observation ``y1``."""
    y1 = np.asarray(y1, dtype=float)
    B = model.B[a1]
    S = B @ model.Sigma1 @ B.T + model.Gbar[a1]
    chol = chol_with_jitter(S, label="initial innovation covariance")
    # K = Sigma1 B' S^{-1} via two triangular solves.
    gain = solve_triangular(chol.T, solve_triangular(chol, B @ model.Sigma1, lower=True), lower=False).T
    resid = y1 - model.c[a1] - B @ model.mu1
    mu = model.mu1 + gain @ resid
    eye = np.eye(model.state_dim)
    joseph = eye - gain @ B
    P = symmetrize(joseph @ model.Sigma1 @ joseph.T + gain @ model.Gbar[a1] @ gain.T)
    return KalmanStat(mu=mu, P=P)


def kalman_predict_update(
    model: RegimeModel, stat: KalmanStat, a_i: int, y_i: np.ndarray
) -> tuple[KalmanStat, float]:
    """One conditional filter step; returns the new stat and the predictive log likelihood of ``y_i``."""
    y_i = np.asarray(y_i, dtype=float)
    T, B = model.T[a_i], model.B[a_i]
    mu_pred = model.d[a_i] + T @ stat.mu
    P_pred = symmetrize(T @ stat.P @ T.T + model.Hbar[a_i])
    S = B @ P_pred @ B.T + model.Gbar[a_i]
    chol = chol_with_jitter(S, label="innovation covariance")
    resid = y_i - model.c[a_i] - B @ mu_pred
    half = solve_triangular(chol, resid, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    loglik = -0.5 * (model.obs_dim * LOG_2PI + logdet + float(half @ half))
    gain = solve_triangular(chol.T, solve_triangular(chol, B @ P_pred, lower=True), lower=False).T
    mu = mu_pred + gain @ resid
    eye = np.eye(model.state_dim)
    joseph = eye - gain @ B
    P = symmetrize(joseph @ P_pred @ joseph.T + gain @ model.Gbar[a_i] @ gain.T)
    return KalmanStat(mu=mu, P=P), float(loglik)


def backward_info_fold(
    model: RegimeModel, carry: float, precision: np.ndarray, shift: np.ndarray, a_i: int, y_i: np.ndarray
) -> BackwardInfoStat:
    """Fold the time-i observation density at regime ``a_i`` into a pushed-back statistic."""
    resid = np.asarray(y_i, dtype=float) - model.c[a_i]
    half = solve_triangular(model.chol_Gbar[a_i], resid, lower=True)
    carry = carry + model.obs_dim * LOG_2PI + model.logdet_Gbar[a_i] + float(half @ half)
    precision = symmetrize(precision + model.Bt_Ginv_B[a_i])
    shift = shift + model.Bt_Ginv[a_i] @ resid
    return BackwardInfoStat(log_carry_constant=float(carry), info_precision=precision, info_shift=shift)


def backward_info_terminal(model: RegimeModel, a_n: int, y_n: np.ndarray) -> BackwardInfoStat:
    """Suffix statistic for the final time: the observation density alone."""
    m = model.state_dim
    return backward_info_fold(model, 0.0, np.zeros((m, m)), np.zeros(m), a_n, y_n)


def backward_info_prefold(
    model: RegimeModel, stat_next: BackwardInfoStat, a_next: int
) -> tuple[float, np.ndarray, np.ndarray]:
    """Push a suffix statistic one step back through the state transition.

    Returns the ``(carry, precision, shift)`` of
    ``log p(y_{i+1:n} | a_{i+1:n}, z_i)`` *before* the time-i observation is
    folded in.  Key intermediate: ``Delta = (I + H' Pinv H)^{-1}`` at the
    regime of time i+1, for which ``H Delta H' = (Hbar^{-1} + Pinv)^{-1}``.
    """
    H = model.H[a_next]
    Hbar_inv = model.Hbar_inv[a_next]
    T = model.T[a_next]
    d = model.d[a_next]
    m = model.state_dim

    delta = np.linalg.inv(np.eye(m) + H.T @ stat_next.info_precision @ H)
    hdh = symmetrize(H @ delta @ H.T)
    chol_hdh = chol_with_jitter(hdh, label="backward step covariance")
    logdet_hdh = 2.0 * float(np.sum(np.log(np.diag(chol_hdh))))

    r = stat_next.info_shift + Hbar_inv @ d
    carry = (
        stat_next.log_carry_constant
        + model.logdet_Hbar[a_next]
        + float(d @ Hbar_inv @ d)
        - logdet_hdh
        - float(r @ hdh @ r)
    )
    core = symmetrize(Hbar_inv - Hbar_inv @ hdh @ Hbar_inv)
    precision = symmetrize(T.T @ core @ T)
    shift = T.T @ (Hbar_inv @ (hdh @ r - d))
    return float(carry), precision, shift


def backward_info_step(
    model: RegimeModel,
    stat_next: BackwardInfoStat,
    a_i: int,
    a_next: int,
    y_i: np.ndarray,
) -> BackwardInfoStat:
    """Full backward step: transition push-back at ``a_next`` then fold ``y_i`` at ``a_i``."""
    carry, precision, shift = backward_info_prefold(model, stat_next, a_next)
    return backward_info_fold(model, carry, precision, shift, a_i, y_i)


def backward_info_sequence(model: RegimeModel, regimes: np.ndarray, ys: np.ndarray) -> list[BackwardInfoStat]:
    """Suffix statistics for every ``i``, returned in time order (index i -> stat for ``y_{i:n}``)."""
    regimes = np.asarray(regimes, dtype=int)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n = regimes.shape[0]
    stats: list[BackwardInfoStat] = [backward_info_terminal(model, int(regimes[-1]), ys[-1])]
    for i in range(n - 2, -1, -1):
        stats.append(backward_info_step(model, stats[-1], int(regimes[i]), int(regimes[i + 1]), ys[i]))
    stats.reverse()
    return stats


def gaussian_backward_integral(mu: np.ndarray, Sigma: np.ndarray, stat: BackwardInfoStat) -> float:
    """``log integral N(z; mu, Sigma) exp(-(c + z'Pinv z)/2 + z'nu) dz``.

    The Gaussian normalizer's ``2 pi`` powers cancel against the integral,
    leaving ``-(log|Sigma| + mu'Sigma^{-1}mu + c - log|Om| - zt'Om zt)/2``
    with ``Om = (Sigma^{-1} + Pinv)^{-1}`` and ``zt = Sigma^{-1}mu + nu``.
    """
    mu = np.asarray(mu, dtype=float)
    chol_S = chol_with_jitter(Sigma, label="component covariance")
    half_mu = solve_triangular(chol_S, mu, lower=True)
    Sigma_inv_mu = solve_triangular(chol_S.T, half_mu, lower=False)
    eye = np.eye(mu.shape[0])
    inv_half = solve_triangular(chol_S, eye, lower=True)
    Sigma_inv = symmetrize(inv_half.T @ inv_half)
    logdet_Sigma = 2.0 * float(np.sum(np.log(np.diag(chol_S))))

    total_prec = symmetrize(Sigma_inv + stat.info_precision)
    chol_T = chol_with_jitter(total_prec, label="combined precision")
    zt = Sigma_inv_mu + stat.info_shift
    half_zt = solve_triangular(chol_T, zt, lower=True)
    logdet_total = 2.0 * float(np.sum(np.log(np.diag(chol_T))))
    return -0.5 * (
        logdet_Sigma
        + float(half_mu @ half_mu)
        + stat.log_carry_constant
        + logdet_total
        - float(half_zt @ half_zt)
    )


def log_normal_quad_expectation(
    mu: np.ndarray, P: np.ndarray, Omega: np.ndarray, lam: np.ndarray
) -> float:
    """``log integral N(z; mu, P) exp(-z'Omega z/2 + z'lam) dz``.

    Stable route via ``Gamma = chol(P)``: with ``L = Gamma'Omega Gamma + I``
    and ``v = Gamma'(lam - Omega mu)`` the value is ``-(log|L| + eta)/2``
    where ``eta = mu'Omega mu - 2 lam'mu - v'L^{-1}v``.  Works for any
    positive semi-definite ``Omega``, including zero.
    """
    mu = np.asarray(mu, dtype=float)
    m = mu.shape[0]
    gamma = chol_with_jitter(P, label="particle covariance")
    L = symmetrize(gamma.T @ Omega @ gamma + np.eye(m))
    chol_L = chol_with_jitter(L, label="collapsed precision")
    v = gamma.T @ (lam - Omega @ mu)
    half_v = solve_triangular(chol_L, v, lower=True)
    logdet_L = 2.0 * float(np.sum(np.log(np.diag(chol_L))))
    eta = float(mu @ Omega @ mu) - 2.0 * float(lam @ mu) - float(half_v @ half_v)
    return -0.5 * (logdet_L + eta)


def log_normal_quad_expectation_batch(
    mu: np.ndarray, P: np.ndarray, Omega: np.ndarray, lam: np.ndarray
) -> np.ndarray:
    """Batched :func:`log_normal_quad_expectation` over stacked ``mu (..., m)``, ``P (..., m, m)``."""
    mu = np.asarray(mu, dtype=float)
    m = mu.shape[-1]
    gamma = chol_with_jitter_batch(P, label="particle covariance")
    L = symmetrize(np.einsum("...ba,bc,...cd->...ad", gamma, Omega, gamma) + np.eye(m))
    chol_L = chol_with_jitter_batch(L, label="collapsed precision")
    v = np.einsum("...ba,...b->...a", gamma, lam - mu @ Omega.T)
    half_v = np.linalg.solve(chol_L, v[..., None])[..., 0]
    logdet_L = 2.0 * np.sum(np.log(np.diagonal(chol_L, axis1=-2, axis2=-1)), axis=-1)
    eta = np.einsum("...a,ab,...b->...", mu, Omega, mu) - 2.0 * (mu @ lam) - np.sum(half_v * half_v, axis=-1)
    return -0.5 * (logdet_L + eta)


def ffbs_terminal_stat(model: RegimeModel, a_n: int, y_n: np.ndarray) -> FfbsBackwardStat:
    """Terminal backward statistic: empty suffix, so only the time-n observation."""
    m = model.state_dim
    resid = np.asarray(y_n, dtype=float) - model.c[a_n]
    return FfbsBackwardStat(
        Omega=np.zeros((m, m)),
        lam=np.zeros(m),
        Omega_hat=model.Bt_Ginv_B[a_n].copy(),
        lam_hat=model.Bt_Ginv[a_n] @ resid,
    )


def ffbs_suffix_part(
    model: RegimeModel, stat_next: FfbsBackwardStat, a_next: int
) -> tuple[np.ndarray, np.ndarray]:
    """Push ``(Omega_hat, lam_hat)`` at time i+1 back through the regime-``a_next`` transition.

    Returns the time-i pair ``(Omega, lam)`` that multiplies a time-i state
    as ``exp(-z'Omega z/2 + z'lam)`` after the time-(i+1) state has been
    integrated out.  Intermediates: ``mvec = lam_hat - Omega_hat d`` and
    ``M = H'Omega_hat H + I``.
    """
    H, T, d = model.H[a_next], model.T[a_next], model.d[a_next]
    m = model.state_dim
    mvec = stat_next.lam_hat - stat_next.Omega_hat @ d
    M = symmetrize(H.T @ stat_next.Omega_hat @ H + np.eye(m))
    chol_M = chol_with_jitter(M, label="backward collapse matrix")
    # X = Omega_hat H M^{-1}: solve M X' = H' Omega_hat.
    X = solve_triangular(chol_M.T, solve_triangular(chol_M, H.T @ stat_next.Omega_hat, lower=True), lower=False).T
    core = stat_next.Omega_hat - X @ (H.T @ stat_next.Omega_hat)
    Omega = symmetrize(T.T @ core @ T)
    lam = T.T @ (mvec - X @ (H.T @ mvec))
    return Omega, lam


def ffbs_extend_stat(
    model: RegimeModel,
    stat_next: FfbsBackwardStat,
    a_next: int,
    a_i: int,
    y_i: np.ndarray,
) -> FfbsBackwardStat:
    """One full backward extension: transition push-back, then fold the time-i observation."""
    Omega, lam = ffbs_suffix_part(model, stat_next, a_next)
    return ffbs_fold_observation(model, Omega, lam, a_i, y_i)


def ffbs_fold_observation(
    model: RegimeModel, Omega: np.ndarray, lam: np.ndarray, a_i: int, y_i: np.ndarray
) -> FfbsBackwardStat:
    resid = np.asarray(y_i, dtype=float) - model.c[a_i]
    return FfbsBackwardStat(
        Omega=Omega,
        lam=lam,
        Omega_hat=symmetrize(Omega + model.Bt_Ginv_B[a_i]),
        lam_hat=lam + model.Bt_Ginv[a_i] @ resid,
    )


def ffbs_backward_stats(model: RegimeModel, regimes: np.ndarray, ys: np.ndarray) -> list[FfbsBackwardStat]:
    """Backward statistics for a fixed regime sequence, one per time, in time order.

    Each extension reuses the next statistic, so a full sweep costs O(n);
    samplers use the incremental pieces (:func:`ffbs_terminal_stat`,
    :func:`ffbs_suffix_part`, :func:`ffbs_fold_observation`) directly.
    """
    regimes = np.asarray(regimes, dtype=int)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n = regimes.shape[0]
    stats: list[FfbsBackwardStat] = [ffbs_terminal_stat(model, int(regimes[-1]), ys[-1])]
    for i in range(n - 2, -1, -1):
        stats.append(ffbs_extend_stat(model, stats[-1], int(regimes[i + 1]), int(regimes[i]), ys[i]))
    stats.reverse()
    return stats


def sequence_loglik(model: RegimeModel, regimes: np.ndarray, ys: np.ndarray) -> float:
    """``log p(y_{1:n}, a_{1:n})`` for a fixed regime sequence, by the forward filter."""
    regimes = np.asarray(regimes, dtype=int)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n = regimes.shape[0]
    a1 = int(regimes[0])
    log_prob = model.log_pi[a1] + float(init_predictive_logliks(model, ys[0])[a1])
    stat = kalman_init(model, a1, ys[0])
    for i in range(1, n):
        if model.Q[regimes[i - 1], regimes[i]] <= 0.0:
            return float("-inf")
        stat, loglik = kalman_predict_update(model, stat, int(regimes[i]), ys[i])
        log_prob += model.log_Q[regimes[i - 1], regimes[i]] + loglik
    return float(log_prob)
