"""Expectation-maximization calibration of the two-factor futures model.

E-step: the rejuvenated two-filter smoother is extended to the pairwise law
of ``(a_{i-1}, z_{i-1}, a_i, z_i)``: the forward side keeps the filtered
particle cloud at ``i-1``, the backward side contributes the time-``i``
observation density and the rejuvenation mixture that marginalizes times
``i+1`` onward.  Because the complete-data log density is quadratic in the
state pair, each time step compresses without approximation to per-regime-
pair weights plus Gaussian first/second moments of the ``2m``-dimensional
pair; those statistics evaluate the expected complete-data log likelihood at
ANY candidate parameter value.

M-step: derivative-free maximization of that expected value over the packed
parameter vector (mean-reversion rate, per-regime yield levels,
volatilities and correlations, per-contract noise levels, regime-transition
diagonal), with infeasible candidates repaired by projection.  The current
iterate is always evaluated first, so every accepted step is an ascent step
of the estimated objective.

A fallback E-step averages exact per-trajectory smoother moments over
backward-simulation regime draws; it produces the same statistics container
and exists to cross-check the pairwise construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .cmaes import OptimizerResult, maximize
from .commodity import (
    DEFAULT_MATURITIES,
    FuturesPanel,
    TwoFactorParams,
    build_clgm,
    initial_state_from_panel,
    params_with_initial_state,
)
from .ffbs import smooth_ffbs, trajectories_matrix
from .forward import forward_pass
from .kalman import backward_info_terminal
from .model import LOG_2PI, ModelValidationError, NumericalError, RegimeModel, symmetrize
from .oracle import rts_given_regimes
from .sampling import make_rng, spawn_rngs
from .twofilter import (
    _batched_quadform_stats,
    backward_filter_pass,
    default_gamma_schedule,
    forward_predictive_mixture,
    merge_rejuvenated,
    prior_predictive_mixture,
    rejuvenation_mixture,
)

__all__ = [
    "EmConfig",
    "EmResult",
    "SmoothedSufficientStats",
    "complete_data_loglik",
    "e_step",
    "e_step_trajectories",
    "em_run",
    "expected_complete_loglik",
    "expected_complete_loglik_terms",
    "m_step",
    "pack_theta",
    "project_theta",
    "stats_from_regime_sequences",
    "theta_labels",
    "unpack_theta",
]


def complete_data_loglik(
    model: RegimeModel, regimes: np.ndarray, states: np.ndarray, ys: np.ndarray
) -> float:
    """Joint log density of regimes, states and observations under the model."""
    regimes = np.asarray(regimes, dtype=int)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n = regimes.shape[0]
    if states.shape[0] != n or ys.shape[0] != n or n < 1:
        raise ModelValidationError("regimes, states and observations must share a positive length")

    from scipy.stats import multivariate_normal

    a1 = regimes[0]
    total = float(model.log_pi[a1])
    total += multivariate_normal.logpdf(states[0], mean=model.mu1, cov=model.Sigma1)
    for i in range(1, n):
        a_prev, a = regimes[i - 1], regimes[i]
        total += float(model.log_Q[a_prev, a])
        mean = model.d[a] + model.T[a] @ states[i - 1]
        total += multivariate_normal.logpdf(states[i], mean=mean, cov=model.Hbar[a])
    for i in range(n):
        a = regimes[i]
        mean = model.c[a] + model.B[a] @ states[i]
        total += multivariate_normal.logpdf(ys[i], mean=mean, cov=model.Gbar[a])
    return float(total)


@dataclass(frozen=True)
class SmoothedSufficientStats:
    """Pairwise smoothing statistics sufficient for the EM objective.

    ``pair_weights[t, b, j]`` estimates ``P(a_t = b, a_{t+1} = j | y_{1:n})``;
    ``pair_means``/``pair_moments`` hold the conditional first and second
    moments of the stacked pair ``(z_t, z_{t+1})`` for that regime pair.
    ``first_*`` are the time-0 marginal statistics extracted from the first
    pair.  ``regime_marginals`` are the single-time smoothed regime
    probabilities from the same underlying passes.
    """

    ys: np.ndarray
    pair_weights: np.ndarray
    pair_means: np.ndarray
    pair_moments: np.ndarray
    first_weights: np.ndarray
    first_means: np.ndarray
    first_moments: np.ndarray
    regime_marginals: np.ndarray
    log_evidence: float

    def __post_init__(self):
        n, J = self.regime_marginals.shape
        m2 = self.pair_means.shape[-1]
        if self.pair_weights.shape != (n - 1, J, J):
            raise ModelValidationError("pairwise weights have inconsistent shape")
        if self.pair_means.shape != (n - 1, J, J, m2) or self.pair_moments.shape != (
            n - 1, J, J, m2, m2,
        ):
            raise ModelValidationError("pairwise moment arrays have inconsistent shapes")
        if np.max(np.abs(self.pair_weights.sum(axis=(1, 2)) - 1.0)) > 1e-6:
            raise ModelValidationError("pairwise weights must normalize at every time step")

    @property
    def n_times(self) -> int:
        return self.regime_marginals.shape[0]

    @property
    def n_regimes(self) -> int:
        return self.regime_marginals.shape[1]

    @property
    def state_dim(self) -> int:
        return self.pair_means.shape[-1] // 2


def _pair_quadratics(
    model: RegimeModel, cloud, rej, y_next: np.ndarray, time_index: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched (A, b, c) of the pairwise components plus their log weights.

    Components are indexed ``(k, j, g)``: forward particle, time-``i`` regime
    and rejuvenation-mixture member.  The quadratic is over the stacked pair
    ``w = (z_{i-1}, z_i)`` with density ``exp(-w'Aw/2 + w'b - c/2)``.
    """
    m = model.state_dim
    J = model.n_regimes
    K = cloud.size
    try:
        chol_P = np.linalg.cholesky(cloud.P)
    except np.linalg.LinAlgError:
        raise NumericalError("filtered covariance is not positive definite", time_index=time_index)
    logdet_P = 2.0 * np.sum(np.log(np.diagonal(chol_P, axis1=-2, axis2=-1)), axis=-1)
    P_inv = np.linalg.inv(cloud.P)
    P_inv_mu = np.einsum("kab,kb->ka", P_inv, cloud.mu)
    mu_quad = np.einsum("ka,ka->k", cloud.mu, P_inv_mu)

    T, Hinv, d = model.T, model.Hbar_inv, model.d
    TtHinv = np.einsum("jba,jbc->jac", T, Hinv)  # T' Hbar^{-1}, (J, m, m)
    A11 = symmetrize(np.einsum("jab,jbc->jac", TtHinv, T))
    Hinv_d = np.einsum("jab,jb->ja", Hinv, d)
    TtHinv_d = np.einsum("jab,jb->ja", TtHinv, d)
    d_quad = np.einsum("ja,ja->j", d, Hinv_d)

    obs = [backward_info_terminal(model, j, y_next) for j in range(J)]
    obs_carry = np.array([stat.log_carry_constant for stat in obs])
    obs_prec = np.stack([stat.info_precision for stat in obs])
    obs_shift = np.stack([stat.info_shift for stat in obs])

    if rej is None:
        G = 1
        rej_prec = np.zeros((1, m, m))
        rej_shift = np.zeros((1, m))
        rej_logw = np.zeros((J, 1))
    else:
        G = rej.size
        rej_prec = rej.precision
        rej_shift = rej.shift
        rej_logw = rej.log_coef[None, :] + model.log_Q[:, rej.regimes_next]

    A = np.zeros((K, J, G, 2 * m, 2 * m))
    A[..., :m, :m] = P_inv[:, None, None] + A11[None, :, None]
    A[..., :m, m:] = -TtHinv[None, :, None]
    A[..., m:, :m] = -np.swapaxes(TtHinv, -2, -1)[None, :, None]
    A[..., m:, m:] = (Hinv + obs_prec)[None, :, None] + rej_prec[None, None, :]

    b = np.zeros((K, J, G, 2 * m))
    b[..., :m] = (P_inv_mu[:, None] - TtHinv_d[None, :])[:, :, None]
    b[..., m:] = (Hinv_d + obs_shift)[None, :, None] + rej_shift[None, None, :]

    with np.errstate(invalid="ignore"):
        log_w = (
            cloud.log_w[:, None, None]
            + model.log_Q[cloud.regimes, :][:, :, None]
            + rej_logw[None, :, :]
        )
    c = (
        (mu_quad + logdet_P)[:, None, None]
        + (d_quad + model.logdet_Hbar + obs_carry)[None, :, None]
        + 2.0 * m * LOG_2PI
        - 2.0 * log_w
    )
    return A, b, c, log_w


def e_step(
    model: RegimeModel,
    ys: np.ndarray,
    n_particles: int,
    rng: int | np.random.Generator | None = 0,
    scheme: str = "KL-OS",
    n_backward: int | None = None,
) -> SmoothedSufficientStats:
    """Pairwise smoothing statistics from one rejuvenated two-filter pass."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n = ys.shape[0]
    if n < 2:
        raise ModelValidationError("the pairwise E-step needs at least two observations")
    J, m = model.n_regimes, model.state_dim
    rng = make_rng(rng)

    clouds = forward_pass(model, ys, n_particles, scheme=scheme, rng=rng)
    schedule = default_gamma_schedule(model, clouds)
    bwd = backward_filter_pass(model, ys, schedule, n_backward or n_particles, rng=rng)
    rej_at = [rejuvenation_mixture(model, bwd[t + 1]) for t in range(n - 1)] + [None]

    marginals = []
    for t in range(n):
        fwd = prior_predictive_mixture(model) if t == 0 else forward_predictive_mixture(
            model, clouds[t - 1]
        )
        marginals.append(merge_rejuvenated(model, fwd, rej_at[t], ys[t]))
    regime_marginals = np.stack([mm.regime_probs for mm in marginals])

    pair_w = np.zeros((n - 1, J, J))
    pair_mean = np.zeros((n - 1, J, J, 2 * m))
    pair_mom = np.zeros((n - 1, J, J, 2 * m, 2 * m))
    for t in range(n - 1):
        cloud = clouds[t]
        A, b, c, _ = _pair_quadratics(model, cloud, rej_at[t + 1], ys[t + 1], t + 1)
        log_integral, mean, cov = _batched_quadform_stats(A, b, c, time_index=t + 1)
        log_norm = logsumexp(log_integral)
        if not np.isfinite(log_norm):
            raise NumericalError("pairwise smoothing weights degenerated", time_index=t + 1)
        probs = np.exp(log_integral - log_norm)  # (K, J, G)
        moment = cov + np.einsum("...a,...b->...ab", mean, mean)
        w_kj = probs.sum(axis=2)
        mean_kj = np.einsum("kjg,kjga->kja", probs, mean)
        mom_kj = np.einsum("kjg,kjgab->kjab", probs, moment)
        for regime in range(J):
            mask = cloud.regimes == regime
            if not np.any(mask):
                continue
            pair_w[t, regime] = w_kj[mask].sum(axis=0)
            pair_mean[t, regime] = mean_kj[mask].sum(axis=0)
            pair_mom[t, regime] = mom_kj[mask].sum(axis=0)
        positive = pair_w[t] > 0.0
        pair_mean[t][positive] /= pair_w[t][positive][:, None]
        pair_mom[t][positive] /= pair_w[t][positive][:, None, None]

    first_w = pair_w[0].sum(axis=1)
    first_mean = np.zeros((J, m))
    first_mom = np.zeros((J, m, m))
    has_mass = first_w > 0.0
    first_mean[has_mass] = (
        np.einsum("bj,bja->ba", pair_w[0], pair_mean[0, :, :, :m])[has_mass]
        / first_w[has_mass][:, None]
    )
    first_mom[has_mass] = (
        np.einsum("bj,bjac->bac", pair_w[0], pair_mom[0, :, :, :m, :m])[has_mass]
        / first_w[has_mass][:, None, None]
    )

    return SmoothedSufficientStats(
        ys=ys,
        pair_weights=pair_w,
        pair_means=pair_mean,
        pair_moments=pair_mom,
        first_weights=first_w,
        first_means=first_mean,
        first_moments=first_mom,
        regime_marginals=regime_marginals,
        log_evidence=clouds[-1].log_norm_const,
    )


def stats_from_regime_sequences(
    model: RegimeModel,
    ys: np.ndarray,
    sequences: np.ndarray,
    weights: np.ndarray,
    regime_marginals: np.ndarray | None = None,
    log_evidence: float = np.nan,
) -> SmoothedSufficientStats:
    """Exact-conditional statistics for weighted regime sequences.

    Each sequence contributes its conditional smoother moments (including the
    one-step cross covariance) computed exactly given the regimes; weights
    must sum to one.
    """
    sequences = np.atleast_2d(np.asarray(sequences, dtype=int))
    weights = np.asarray(weights, dtype=float)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n_seq, n = sequences.shape
    if weights.shape != (n_seq,) or abs(weights.sum() - 1.0) > 1e-8:
        raise ModelValidationError("sequence weights must be a probability vector")
    if n < 2:
        raise ModelValidationError("pairwise statistics need at least two time steps")
    J, m = model.n_regimes, model.state_dim

    pair_w = np.zeros((n - 1, J, J))
    pair_mean = np.zeros((n - 1, J, J, 2 * m))
    pair_mom = np.zeros((n - 1, J, J, 2 * m, 2 * m))
    first_w = np.zeros(J)
    first_mean = np.zeros((J, m))
    first_mom = np.zeros((J, m, m))
    empirical = np.zeros((n, J))
    for seq, w in zip(sequences, weights):
        rts = rts_given_regimes(model, seq, ys)
        means, covs, lag = rts.smoothed_means, rts.smoothed_covs, rts.lag_one_covs
        empirical[np.arange(n), seq] += w
        first_w[seq[0]] += w
        first_mean[seq[0]] += w * means[0]
        first_mom[seq[0]] += w * (covs[0] + np.outer(means[0], means[0]))
        for t in range(n - 1):
            b, j = seq[t], seq[t + 1]
            stacked = np.concatenate([means[t], means[t + 1]])
            block = np.zeros((2 * m, 2 * m))
            block[:m, :m] = covs[t]
            block[m:, m:] = covs[t + 1]
            block[:m, m:] = lag[t]
            block[m:, :m] = lag[t].T
            pair_w[t, b, j] += w
            pair_mean[t, b, j] += w * stacked
            pair_mom[t, b, j] += w * (block + np.outer(stacked, stacked))
    for arrs, wts in (([pair_mean, pair_mom], pair_w), ([first_mean, first_mom], first_w)):
        positive = wts > 0.0
        for arr in arrs:
            extra = (1,) * (arr.ndim - wts.ndim)
            arr[positive] /= wts[positive].reshape(wts[positive].shape + extra)
    return SmoothedSufficientStats(
        ys=ys,
        pair_weights=pair_w,
        pair_means=pair_mean,
        pair_moments=pair_mom,
        first_weights=first_w,
        first_means=first_mean,
        first_moments=first_mom,
        regime_marginals=regime_marginals if regime_marginals is not None else empirical,
        log_evidence=float(log_evidence),
    )


def e_step_trajectories(
    model: RegimeModel,
    ys: np.ndarray,
    n_trajectories: int,
    rng: int | np.random.Generator | None = 0,
    n_particles: int | None = None,
    scheme: str = "KL-OS",
) -> SmoothedSufficientStats:
    """Fallback E-step: average exact per-trajectory moments over backward draws."""
    result = smooth_ffbs(
        model,
        ys,
        n_particles or n_trajectories,
        n_trajectories,
        scheme=scheme,
        rng=rng,
        rejuvenate=True,
    )
    mat = trajectories_matrix(result.trajectories)
    unique, counts = np.unique(mat, axis=0, return_counts=True)
    return stats_from_regime_sequences(
        model,
        ys,
        unique,
        counts / counts.sum(),
        regime_marginals=result.marginals.regime_probs,
        log_evidence=result.log_evidence,
    )


def expected_complete_loglik_terms(
    model: RegimeModel, stats: SmoothedSufficientStats
) -> dict[str, float]:
    """Decomposed expected complete-data log likelihood under ``stats``.

    Returns the initial-law, regime-transition, state-dynamics and
    observation terms; their sum is the EM objective at ``model``.
    """
    J, m, p = model.n_regimes, model.state_dim, model.obs_dim
    if stats.n_regimes != J or stats.state_dim != m or stats.ys.shape[1] != p:
        raise ModelValidationError("statistics and model dimensions do not match")
    ys = stats.ys
    W, M1, M2 = stats.pair_weights, stats.pair_means, stats.pair_moments
    active = W > 0.0

    # Initial law: regime prior plus Gaussian initial state density.
    S_inv = np.linalg.inv(model.Sigma1)
    _, logdet_S = np.linalg.slogdet(model.Sigma1)
    quad0 = (
        np.einsum("ab,jba->j", S_inv, stats.first_moments)
        - 2.0 * np.einsum("a,ab,jb->j", model.mu1, S_inv, stats.first_means)
        + float(model.mu1 @ S_inv @ model.mu1)
    )
    w0 = stats.first_weights
    initial = float(np.sum(np.where(w0 > 0.0, w0 * model.log_pi, 0.0)))
    initial -= 0.5 * float(np.sum(w0 * (m * LOG_2PI + logdet_S + quad0)))

    # Regime transitions.
    with np.errstate(invalid="ignore"):
        trans_contrib = W * model.log_Q[None, :, :]
    transition = float(np.sum(np.where(active, trans_contrib, 0.0)))

    # State dynamics: quadratic in the stacked pair w = (z_{t}, z_{t+1}).
    T, Hinv, d = model.T, model.Hbar_inv, model.d
    TtHinv = np.einsum("jba,jbc->jac", T, Hinv)
    coupling = np.zeros((J, 2 * m, 2 * m))
    coupling[:, :m, :m] = np.einsum("jab,jbc->jac", TtHinv, T)
    coupling[:, :m, m:] = -TtHinv
    coupling[:, m:, :m] = -np.swapaxes(TtHinv, -2, -1)
    coupling[:, m:, m:] = Hinv
    linear = np.concatenate([-np.einsum("jab,jb->ja", TtHinv, d), np.einsum("jab,jb->ja", Hinv, d)], axis=1)
    d_quad = np.einsum("ja,jab,jb->j", d, Hinv, d)
    quad_dyn = (
        np.einsum("jac,tbjca->tbj", coupling, M2)
        - 2.0 * np.einsum("ja,tbja->tbj", linear, M1)
        + d_quad[None, None, :]
    )
    dyn_contrib = W * (m * LOG_2PI + model.logdet_Hbar[None, None, :] + quad_dyn)
    dynamics = -0.5 * float(np.sum(np.where(active, dyn_contrib, 0.0)))

    # Observations: time 0 under the first-block stats, later times under the
    # second block of the pair ending there.
    resid0 = ys[0][None, :] - model.c  # (J, p)
    quad_y0 = (
        np.einsum("jab,jba->j", model.Bt_Ginv_B, stats.first_moments)
        - 2.0 * np.einsum("jap,jp,ja->j", model.Bt_Ginv, resid0, stats.first_means)
        + np.einsum("jp,jpq,jq->j", resid0, model.Gbar_inv, resid0)
    )
    observation = -0.5 * float(
        np.sum(w0 * (p * LOG_2PI + model.logdet_Gbar + quad_y0))
    )
    resid = ys[1:, None, :] - model.c[None, :, :]  # (n-1, J, p)
    M1_z = M1[..., m:]
    M2_zz = M2[..., m:, m:]
    quad_y = (
        np.einsum("jac,tbjca->tbj", model.Bt_Ginv_B, M2_zz)
        - 2.0 * np.einsum("jap,tjp,tbja->tbj", model.Bt_Ginv, resid, M1_z)
        + np.einsum("tjp,jpq,tjq->tj", resid, model.Gbar_inv, resid)[:, None, :]
    )
    obs_contrib = W * (p * LOG_2PI + model.logdet_Gbar[None, None, :] + quad_y)
    observation += -0.5 * float(np.sum(np.where(active, obs_contrib, 0.0)))

    return {
        "initial": initial,
        "transition": transition,
        "dynamics": dynamics,
        "observation": observation,
    }


def expected_complete_loglik(model: RegimeModel, stats: SmoothedSufficientStats) -> float:
    """EM objective: expected complete-data log likelihood at ``model``."""
    return float(sum(expected_complete_loglik_terms(model, stats).values()))


# ---------------------------------------------------------------------------
# Parameter vector packing for the derivative-free M-step.

KAPPA_BOUNDS = (1e-4, 1e3)
ALPHA_BOUND = 50.0
SCALE_BOUNDS = (1e-4, 1e2)
NOISE_BOUNDS = (1e-6, 1e2)
RHO_BOUND = 0.9999
QDIAG_BOUNDS = (1e-6, 1.0 - 1e-6)


def _check_packable(n_regimes: int) -> None:
    if n_regimes > 2:
        raise ModelValidationError(
            "the calibration parameter vector supports one or two regimes"
        )


def theta_labels(n_regimes: int, n_contracts: int) -> list[str]:
    """Column labels of the packed parameter vector, in packing order."""
    _check_packable(n_regimes)
    labels = ["kappa"]
    for name in ("alpha", "sigma", "eta", "rho"):
        labels += [f"{name}{j + 1}" for j in range(n_regimes)]
    labels += [f"g{l + 1}" for l in range(n_contracts)]
    if n_regimes >= 2:
        labels += [f"q{j + 1}{j + 1}" for j in range(n_regimes)]
    return labels


def pack_theta(params: TwoFactorParams) -> np.ndarray:
    """Flatten the calibrated parameters into the optimizer vector."""
    _check_packable(params.n_regimes)
    parts = [np.array([params.kappa]), params.alpha, params.sigma, params.eta, params.rho, params.g]
    if params.n_regimes >= 2:
        parts.append(np.diagonal(params.Q))
    return np.concatenate(parts)


def unpack_theta(theta: np.ndarray, template: TwoFactorParams) -> TwoFactorParams:
    """Rebuild a parameter set from the packed vector.

    ``pi``, ``mu1``, ``Sigma1``, ``r`` and ``tau`` stay at the template's
    values; for two regimes the off-diagonal transition mass is one minus the
    packed diagonal.
    """
    J, P = template.n_regimes, template.n_contracts
    _check_packable(J)
    theta = np.asarray(theta, dtype=float)
    expected = 1 + 4 * J + P + (J if J >= 2 else 0)
    if theta.shape != (expected,):
        raise ModelValidationError(f"parameter vector must have length {expected}")
    pos = 1
    blocks = {}
    for name in ("alpha", "sigma", "eta", "rho"):
        blocks[name] = theta[pos : pos + J]
        pos += J
    g = theta[pos : pos + P]
    pos += P
    if J >= 2:
        qdiag = theta[pos : pos + J]
        Q = np.empty((J, J))
        Q[0] = (qdiag[0], 1.0 - qdiag[0])
        Q[1] = (1.0 - qdiag[1], qdiag[1])
    else:
        Q = np.array([[1.0]])
    return TwoFactorParams(
        kappa=float(theta[0]),
        alpha=blocks["alpha"],
        sigma=blocks["sigma"],
        eta=blocks["eta"],
        rho=blocks["rho"],
        g=g,
        Q=Q,
        pi=template.pi,
        mu1=template.mu1,
        Sigma1=template.Sigma1,
        r=template.r,
        tau=template.tau,
    )


def project_theta(
    theta: np.ndarray, n_regimes: int, n_contracts: int, enforce_alpha_order: bool = True
) -> np.ndarray:
    """Project a candidate vector onto the feasible parameter set.

    Clips scales and correlations into open bounds and (optionally) replaces
    a decreasing-order violation of the per-regime yield levels by their
    isotonic projection (pool-adjacent-violators toward nonincreasing order).
    """
    _check_packable(n_regimes)
    theta = np.array(theta, dtype=float)
    J, P = n_regimes, n_contracts
    theta[0] = np.clip(theta[0], *KAPPA_BOUNDS)
    alpha = np.clip(theta[1 : 1 + J], -ALPHA_BOUND, ALPHA_BOUND)
    if enforce_alpha_order and J > 1:
        # Pool adjacent violators for the nonincreasing order alpha_1 >= alpha_2 >= ...
        values = list(alpha)
        sizes = [1] * len(values)
        i = 0
        while i < len(values) - 1:
            if values[i] < values[i + 1]:
                merged = (values[i] * sizes[i] + values[i + 1] * sizes[i + 1]) / (
                    sizes[i] + sizes[i + 1]
                )
                values[i : i + 2] = [merged]
                sizes[i : i + 2] = [sizes[i] + sizes[i + 1]]
                i = max(i - 1, 0)
            else:
                i += 1
        alpha = np.concatenate([np.full(k, v) for v, k in zip(values, sizes)])
    theta[1 : 1 + J] = alpha
    pos = 1 + J
    theta[pos : pos + 2 * J] = np.clip(theta[pos : pos + 2 * J], *SCALE_BOUNDS)  # sigma, eta
    pos += 2 * J
    theta[pos : pos + J] = np.clip(theta[pos : pos + J], -RHO_BOUND, RHO_BOUND)
    pos += J
    theta[pos : pos + P] = np.clip(theta[pos : pos + P], *NOISE_BOUNDS)
    pos += P
    if J >= 2:
        theta[pos : pos + J] = np.clip(theta[pos : pos + J], *QDIAG_BOUNDS)
    return theta


# ---------------------------------------------------------------------------
# EM driver.


@dataclass(frozen=True)
class EmConfig:
    """Settings of the EM calibration loop."""

    params: TwoFactorParams
    maturities: tuple[int, ...] = DEFAULT_MATURITIES
    n_iterations: int = 20
    n_particles: int = 100
    opt_sigma: float = 0.005
    opt_population: int = 100
    opt_parents: int = 20
    opt_max_evaluations: int = 3000
    enforce_alpha_order: bool = True
    init_from_panel: bool = True
    common_random_numbers: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "maturities", tuple(int(m) for m in self.maturities))
        if self.n_iterations < 0 or self.n_particles < 1:
            raise ModelValidationError("iteration and particle counts must be nonnegative/positive")
        if self.opt_max_evaluations < 1:
            raise ModelValidationError("optimizer budget must be positive")
        if len(self.maturities) != self.params.n_contracts:
            raise ModelValidationError("maturity count must match the number of noise levels g")

    def to_json(self) -> str:
        payload = {
            "params": json.loads(self.params.to_json()),
            "maturities": list(self.maturities),
            "n_iterations": self.n_iterations,
            "n_particles": self.n_particles,
            "opt_sigma": self.opt_sigma,
            "opt_population": self.opt_population,
            "opt_parents": self.opt_parents,
            "opt_max_evaluations": self.opt_max_evaluations,
            "enforce_alpha_order": self.enforce_alpha_order,
            "init_from_panel": self.init_from_panel,
            "common_random_numbers": self.common_random_numbers,
            "seed": self.seed,
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str | dict) -> "EmConfig":
        payload = json.loads(text) if isinstance(text, str) else dict(text)
        if "params" not in payload:
            raise ModelValidationError("EM config JSON must contain a 'params' object")
        payload = dict(payload)
        payload["params"] = TwoFactorParams.from_json(payload["params"])
        if "maturities" in payload:
            payload["maturities"] = tuple(payload["maturities"])
        return cls(**payload)


def m_step(
    evaluator,
    theta_start: np.ndarray,
    config: EmConfig,
    rng: int | np.random.Generator = 0,
) -> OptimizerResult:
    """Maximize the E-step evaluator from the current iterate.

    The starting point is evaluated first by the optimizer, so the result
    never scores below the current iterate (generalized-EM ascent).
    """
    J, P = config.params.n_regimes, config.params.n_contracts

    def project(theta):
        return project_theta(theta, J, P, config.enforce_alpha_order)

    return maximize(
        evaluator,
        theta_start,
        sigma0=config.opt_sigma,
        max_evaluations=config.opt_max_evaluations,
        rng=rng,
        population=config.opt_population,
        parents=config.opt_parents,
        project=project,
    )


@dataclass(frozen=True)
class EmResult:
    """Trace of the EM loop plus the final smoothing output."""

    theta_trace: np.ndarray
    params_trace: list[TwoFactorParams]
    q_before: np.ndarray
    q_after: np.ndarray
    log_evidences: np.ndarray
    final_params: TwoFactorParams
    regime_posteriors: np.ndarray

    @property
    def ascent_flags(self) -> np.ndarray:
        return self.q_after >= self.q_before

    @property
    def ascent_fraction(self) -> float:
        if self.q_before.size == 0:
            return 1.0
        return float(np.mean(self.q_after > self.q_before))


def em_run(config: EmConfig, panel: FuturesPanel) -> EmResult:
    """Run the EM loop on a futures panel and return its trace."""
    if panel.maturities != config.maturities:
        raise ModelValidationError(
            f"panel maturities {panel.maturities} do not match config {config.maturities}"
        )
    params = config.params
    if config.init_from_panel:
        mu1, Sigma1 = initial_state_from_panel(panel, r=params.r, tau=params.tau)
        params = params_with_initial_state(params, mu1, Sigma1)
    ys = panel.log_prices
    maturities = list(config.maturities)

    rngs = spawn_rngs(config.seed, 2 * config.n_iterations + 1)
    e_rngs = rngs[: config.n_iterations + 1]
    m_rngs = rngs[config.n_iterations + 1 :]
    if config.common_random_numbers:
        e_seeds = [np.random.SeedSequence(config.seed).spawn(1)[0]] * (config.n_iterations + 1)
        e_rngs = [np.random.Generator(np.random.Philox(s)) for s in e_seeds]

    theta = project_theta(
        pack_theta(params), params.n_regimes, params.n_contracts, config.enforce_alpha_order
    )
    template = params
    theta_trace = [theta.copy()]
    params_trace = [unpack_theta(theta, template)]
    q_before = np.empty(config.n_iterations)
    q_after = np.empty(config.n_iterations)
    evidences = np.empty(config.n_iterations + 1)

    for p in range(config.n_iterations):
        current = unpack_theta(theta, template)
        model = build_clgm(current, maturities)
        stats = e_step(model, ys, config.n_particles, rng=e_rngs[p])
        evidences[p] = stats.log_evidence

        def evaluator(candidate, stats=stats):
            candidate_params = unpack_theta(candidate, template)
            return expected_complete_loglik(build_clgm(candidate_params, maturities), stats)

        q_before[p] = evaluator(theta)
        opt = m_step(evaluator, theta, config, rng=m_rngs[p])
        q_after[p] = opt.value
        theta = opt.x
        theta_trace.append(theta.copy())
        params_trace.append(unpack_theta(theta, template))

    final_params = unpack_theta(theta, template)
    final_model = build_clgm(final_params, maturities)
    final_stats = e_step(ys=ys, model=final_model, n_particles=config.n_particles, rng=e_rngs[-1])
    evidences[-1] = final_stats.log_evidence

    return EmResult(
        theta_trace=np.stack(theta_trace),
        params_trace=params_trace,
        q_before=q_before,
        q_after=q_after,
        log_evidences=evidences,
        final_params=final_params,
        regime_posteriors=final_stats.regime_marginals,
    )
