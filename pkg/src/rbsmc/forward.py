"""Rao-Blackwellized forward filter with optimal-selection resampling.

Each particle carries a regime trajectory (as a parent pointer chain across
per-time clouds) and the exact filtered Gaussian moments of the state given
that trajectory.  At every step the filter expands *all* regime offspring of
every particle, then thins the ``N x J`` table back to about ``N`` entries
with one of three schemes:

- ``"KL-OS"``: threshold ``lam`` solves ``sum min(w/lam, 1) = N``; entries
  with ``w >= lam`` survive with unchanged weight, the rest survive with
  probability ``w/lam`` and weight ``lam``;
- ``"CS-OS"``: threshold solves ``sum min(sqrt(w/lam), 1) = N``; sub-threshold
  entries survive with probability ``sqrt(w/lam)`` and weight ``sqrt(w*lam)``;
- ``"multinomial"``: pick an ancestor by weight, then a regime within the
  ancestor's offspring row; the importance-correct new weight is the
  ancestor's offspring row sum.

Both OS schemes keep the expected final unnormalized weight of every table
entry equal to its candidate weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .kalman import init_predictive_logliks, kalman_init
from .model import LOG_2PI, ModelValidationError, NumericalError, RegimeModel, symmetrize
from .sampling import categorical_from_logw, make_rng, normalize_log_weights


@dataclass
class ParticleCloud:
    """Weighted particles at one time step.

    ``ancestors[k]`` indexes the previous cloud (-1 at the first step), so a
    full regime trajectory is recovered by walking parents backward; clouds
    share prefixes implicitly.  ``log_norm_const`` accumulates the filter's
    log evidence estimate up to this time.
    """

    time_index: int
    regimes: np.ndarray
    ancestors: np.ndarray
    log_w: np.ndarray
    mu: np.ndarray
    P: np.ndarray
    log_norm_const: float

    @property
    def size(self) -> int:
        return self.regimes.shape[0]


@dataclass
class OffspringTable:
    """All regime extensions of every particle, with candidate weights.

    Arrays are indexed ``[k, j]`` for ancestor ``k`` and offspring regime
    ``j``.  ``log_w_tilde`` is normalized over the whole table;
    ``log_gamma`` is the un-normalized incremental weight
    ``log Q(a_prev, j) + log N(y; predictive)``.
    """

    time_index: int
    log_gamma: np.ndarray
    log_w_tilde: np.ndarray
    mu_pred: np.ndarray
    P_pred: np.ndarray
    mu_filt: np.ndarray
    P_filt: np.ndarray
    log_obs: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.log_w_tilde.shape


def init_cloud(
    model: RegimeModel, y1: np.ndarray, N: int, rng: int | np.random.Generator
) -> ParticleCloud:
    """Time-1 cloud: regimes sampled from the exact posterior over ``a_1`` given ``y_1``.

    Regime ``j`` is drawn with probability proportional to
    ``pi_j * N(y1; c_j + B_j mu1, B_j Sigma1 B_j' + Gbar_j)``; each particle
    gets the regime-conditional Kalman-updated moments and weight ``1/N``.
    """
    if N < 1:
        raise ModelValidationError("particle count must be at least 1")
    rng = make_rng(rng)
    y1 = np.asarray(y1, dtype=float)
    log_post = model.log_pi + init_predictive_logliks(model, y1)
    _, log_evidence = normalize_log_weights(log_post, time_index=0)
    regimes = categorical_from_logw(log_post, N, rng, time_index=0).astype(np.int64)

    stats = [kalman_init(model, j, y1) for j in range(model.n_regimes)]
    mu = np.stack([stats[j].mu for j in regimes])
    P = np.stack([stats[j].P for j in regimes])
    return ParticleCloud(
        time_index=0,
        regimes=regimes,
        ancestors=np.full(N, -1, dtype=np.int64),
        log_w=np.full(N, -np.log(N)),
        mu=mu,
        P=P,
        log_norm_const=float(log_evidence),
    )


def predict_moments_per_regime(
    model: RegimeModel, mu: np.ndarray, P: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One-step-ahead state moments for every particle under every regime.

    Returns ``mu_pred (N, J, m)`` and ``P_pred (N, J, m, m)`` where entry
    ``[k, j]`` is ``(d_j + T_j mu_k, T_j P_k T_j' + Hbar_j)``.
    """
    mu_pred = model.d[None, :, :] + np.einsum("jab,kb->kja", model.T, mu)
    P_pred = symmetrize(np.einsum("jab,kbc,jdc->kjad", model.T, P, model.T) + model.Hbar[None])
    return mu_pred, P_pred


def observation_update_batch(
    model: RegimeModel, y: np.ndarray, mu_pred: np.ndarray, P_pred: np.ndarray, time_index: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Joseph-form measurement update applied across an ``(N, J)`` table.

    Returns ``(log_obs, mu_filt, P_filt)`` where ``log_obs[k, j]`` is the
    predictive log density ``log N(y; c_j + B_j mu_pred, B_j P_pred B_j' + Gbar_j)``.
    """
    y = np.asarray(y, dtype=float)
    N, J, m = mu_pred.shape
    p = model.obs_dim
    log_obs = np.empty((N, J))
    mu_filt = np.empty_like(mu_pred)
    P_filt = np.empty_like(P_pred)
    eye = np.eye(m)
    # Overflow in the residual arithmetic is caught by the finiteness check
    # below and surfaced as a NumericalError; silence the raw numpy warning.
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(J):
            B, c = model.B[j], model.c[j]
            PBt = np.einsum("kab,pb->kap", P_pred[:, j], B)
            S = symmetrize(np.einsum("pa,kaq->kpq", B, PBt) + model.Gbar[j][None])
            chol = np.linalg.cholesky(S)
            resid = y[None, :] - c[None, :] - np.einsum("pa,ka->kp", B, mu_pred[:, j])
            half = np.linalg.solve(chol, resid[..., None])[..., 0]
            logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
            log_obs[:, j] = -0.5 * (p * LOG_2PI + logdet + np.sum(half * half, axis=-1))
            # Gain K = P B' S^{-1} via the Cholesky factor of S.
            gain = np.linalg.solve(
                np.swapaxes(chol, -1, -2), np.linalg.solve(chol, np.swapaxes(PBt, -1, -2))
            )
            gain = np.swapaxes(gain, -1, -2)
            mu_filt[:, j] = mu_pred[:, j] + np.einsum("kap,kp->ka", gain, resid)
            joseph = eye[None] - gain @ B[None]
            P_filt[:, j] = symmetrize(
                np.einsum("kab,kbc,kdc->kad", joseph, P_pred[:, j], joseph)
                + np.einsum("kap,pq,kbq->kab", gain, model.Gbar[j], gain)
            )
    if not np.all(np.isfinite(log_obs)):
        raise NumericalError("non-finite predictive density in observation update", time_index=time_index)
    return log_obs, mu_filt, P_filt


def extend_all_offspring(model: RegimeModel, cloud: ParticleCloud, y: np.ndarray) -> OffspringTable:
    """Expand every particle into all ``J`` regime offspring with candidate weights."""
    time_index = cloud.time_index + 1
    mu_pred, P_pred = predict_moments_per_regime(model, cloud.mu, cloud.P)
    log_obs, mu_filt, P_filt = observation_update_batch(model, y, mu_pred, P_pred, time_index)
    log_gamma = model.log_Q[cloud.regimes] + log_obs
    log_w_tilde, _ = normalize_log_weights(cloud.log_w[:, None] + log_gamma, time_index=time_index)
    return OffspringTable(
        time_index=time_index,
        log_gamma=log_gamma,
        log_w_tilde=log_w_tilde,
        mu_pred=mu_pred,
        P_pred=P_pred,
        mu_filt=mu_filt,
        P_filt=P_filt,
        log_obs=log_obs,
    )


def _sorted_weights(weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Descending sort with ties broken by flattened (ancestor, regime) index."""
    flat = weights.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    return flat[order], order


def solve_klos_threshold(weights: np.ndarray, N: int) -> float:
    """Exact root of ``sum min(w/lam, 1) = N`` for normalized weights.

    Scans segments of the descending-sorted weights: if the ``s`` largest
    entries sit at their cap, ``lam = (sum of the rest) / (N - s)``; the
    first segment whose candidate is consistent with the sort order wins.
    """
    w, _ = _sorted_weights(np.asarray(weights, dtype=float))
    M = w.shape[0]
    if N >= M:
        raise NumericalError("threshold undefined: target count is not below the table size")
    tail = np.concatenate([np.cumsum(w[::-1])[::-1], [0.0]])
    for s in range(N):
        lam = tail[s] / (N - s)
        upper_ok = s == 0 or w[s - 1] >= lam * (1.0 - 1e-12)
        lower_ok = lam > w[s] * (1.0 - 1e-12)
        if upper_ok and lower_ok:
            return float(lam)
    raise AssertionError("threshold equation had no valid segment; weights were not normalized")


def solve_csos_threshold(weights: np.ndarray, N: int) -> float:
    """Exact root of ``sum min(sqrt(w/lam), 1) = N`` for normalized weights."""
    w, _ = _sorted_weights(np.asarray(weights, dtype=float))
    M = w.shape[0]
    if N >= M:
        raise NumericalError("threshold undefined: target count is not below the table size")
    roots = np.sqrt(w)
    tail = np.concatenate([np.cumsum(roots[::-1])[::-1], [0.0]])
    for s in range(N):
        lam = (tail[s] / (N - s)) ** 2
        upper_ok = s == 0 or w[s - 1] >= lam * (1.0 - 1e-12)
        lower_ok = lam > w[s] * (1.0 - 1e-12)
        if upper_ok and lower_ok:
            return float(lam)
    raise AssertionError("threshold equation had no valid segment; weights were not normalized")


def _cloud_from_survivors(
    table: OffspringTable, keep: np.ndarray, new_weights: np.ndarray, log_norm_const: float
) -> ParticleCloud:
    N_prev, J = table.shape
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise NumericalError("selection kept no particles", time_index=table.time_index)
    ancestors = (idx // J).astype(np.int64)
    regimes = (idx % J).astype(np.int64)
    with np.errstate(divide="ignore"):
        log_w = np.log(new_weights[idx])
    log_w, _ = normalize_log_weights(log_w, time_index=table.time_index)
    return ParticleCloud(
        time_index=table.time_index,
        regimes=regimes,
        ancestors=ancestors,
        log_w=log_w,
        mu=table.mu_filt.reshape(N_prev * J, -1)[idx],
        P=table.P_filt.reshape((N_prev * J,) + table.P_filt.shape[2:])[idx],
        log_norm_const=log_norm_const,
    )


def _keep_everything(table: OffspringTable, log_norm_const: float) -> ParticleCloud:
    weights = np.exp(table.log_w_tilde.reshape(-1))
    return _cloud_from_survivors(table, weights > 0.0, weights, log_norm_const)


def select_klos(
    table: OffspringTable, N: int, rng: int | np.random.Generator, log_norm_const: float = 0.0
) -> ParticleCloud:
    """Kullback-Leibler optimal selection of about ``N`` survivors."""
    rng = make_rng(rng)
    weights = np.exp(table.log_w_tilde.reshape(-1))
    if N >= weights.shape[0]:
        return _keep_everything(table, log_norm_const)
    lam = solve_klos_threshold(weights, N)
    uniforms = rng.random(weights.shape[0])
    sure = weights >= lam
    keep = sure | (uniforms * lam < weights)
    new_weights = np.where(sure, weights, lam)
    return _cloud_from_survivors(table, keep, new_weights, log_norm_const)


def select_csos(
    table: OffspringTable, N: int, rng: int | np.random.Generator, log_norm_const: float = 0.0
) -> ParticleCloud:
    """Chi-square optimal selection of about ``N`` survivors."""
    rng = make_rng(rng)
    weights = np.exp(table.log_w_tilde.reshape(-1))
    if N >= weights.shape[0]:
        return _keep_everything(table, log_norm_const)
    lam = solve_csos_threshold(weights, N)
    uniforms = rng.random(weights.shape[0])
    sure = weights >= lam
    survival = np.sqrt(np.minimum(weights / lam, 1.0))
    keep = sure | (uniforms < survival)
    new_weights = np.where(sure, weights, np.sqrt(weights * lam))
    return _cloud_from_survivors(table, keep, new_weights, log_norm_const)


def select_multinomial(
    table: OffspringTable, N: int, rng: int | np.random.Generator, log_w_prev: np.ndarray,
    log_norm_const: float = 0.0,
) -> ParticleCloud:
    """Ancestor-then-regime multinomial resampling with row-sum reweighting.

    The proposal draws ancestor ``k`` by previous weight and regime ``j``
    within the ancestor's offspring row; matching the target over ``(k, j)``
    leaves each draw carrying the ancestor's row sum ``sum_j gamma[k, j]``
    as its new unnormalized weight.
    """
    rng = make_rng(rng)
    N_prev, J = table.shape
    ancestors = categorical_from_logw(log_w_prev, N, rng, time_index=table.time_index).astype(np.int64)
    row_max = table.log_gamma.max(axis=1)
    if not np.all(np.isfinite(row_max)):
        raise NumericalError("an ancestor has zero offspring mass", time_index=table.time_index)
    row_cdf = np.cumsum(np.exp(table.log_gamma - row_max[:, None]), axis=1)
    picked_cdf = row_cdf[ancestors]
    u = rng.random(N) * picked_cdf[:, -1]
    regimes = np.clip((picked_cdf <= u[:, None]).sum(axis=1).astype(np.int64), 0, J - 1)
    row_sums = np.logaddexp.reduce(table.log_gamma, axis=1)
    log_w, _ = normalize_log_weights(row_sums[ancestors], time_index=table.time_index)
    return ParticleCloud(
        time_index=table.time_index,
        regimes=regimes,
        ancestors=ancestors,
        log_w=log_w,
        mu=table.mu_filt[ancestors, regimes],
        P=table.P_filt[ancestors, regimes],
        log_norm_const=log_norm_const,
    )


SCHEMES = ("KL-OS", "CS-OS", "multinomial")


def forward_pass(
    model: RegimeModel,
    ys: np.ndarray,
    N: int,
    scheme: str = "KL-OS",
    rng: int | np.random.Generator | None = 0,
) -> list[ParticleCloud]:
    """Full filter over ``ys``; returns the cloud at every time step."""
    if scheme not in SCHEMES:
        raise ModelValidationError(f"unknown selection scheme {scheme!r}; choose from {SCHEMES}")
    rng = make_rng(rng)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    clouds = [init_cloud(model, ys[0], N, rng)]
    for i in range(1, ys.shape[0]):
        cloud = clouds[-1]
        table = extend_all_offspring(model, cloud, ys[i])
        step_evidence = _table_log_evidence(cloud, table)
        log_norm_const = cloud.log_norm_const + step_evidence
        if scheme == "KL-OS":
            clouds.append(select_klos(table, N, rng, log_norm_const))
        elif scheme == "CS-OS":
            clouds.append(select_csos(table, N, rng, log_norm_const))
        else:
            clouds.append(select_multinomial(table, N, rng, cloud.log_w, log_norm_const))
    return clouds


def _table_log_evidence(cloud: ParticleCloud, table: OffspringTable) -> float:
    combined = cloud.log_w[:, None] + table.log_gamma
    top = np.max(combined)
    if not np.isfinite(top):
        raise NumericalError("zero predictive mass across all offspring", time_index=table.time_index)
    return float(top + np.log(np.sum(np.exp(combined - top))))


def filter_regime_marginals(clouds: list[ParticleCloud], J: int) -> np.ndarray:
    """Per-time filtered regime probabilities ``(n, J)`` from the clouds."""
    out = np.zeros((len(clouds), J))
    for i, cloud in enumerate(clouds):
        weights = np.exp(cloud.log_w)
        np.add.at(out[i], cloud.regimes, weights)
    return out


def trajectory_matrix(clouds: list[ParticleCloud]) -> np.ndarray:
    """Regime trajectories ``(N_final, n)`` reconstructed through ancestor pointers."""
    n = len(clouds)
    N = clouds[-1].size
    out = np.empty((N, n), dtype=np.int64)
    out[:, n - 1] = clouds[-1].regimes
    parents = clouds[-1].ancestors
    for i in range(n - 2, -1, -1):
        out[:, i] = clouds[i].regimes[parents]
        parents = clouds[i].ancestors[parents]
    return out
