"""Two-filter smoothing for regime-switching linear Gaussian models.

The smoother runs the particle filter forwards, an auxiliary backward
particle filter over regime suffixes, and merges the two at every time
step.  The backward filter targets an artificial joint density built from
per-time Gaussian mixtures over ``(a_i, z_i)`` (the "schedule"); because the
model is conditionally linear Gaussian, every backward particle carries an
exact information-form statistic for ``log p(y_{i:n} | a_{i:n}, z_i)`` and
all integrals are closed form.

Two merge variants are provided:

- a plain merge that combines the forward predictive mixture with the
  backward particles at the same time, restricted to the regimes the
  backward pass visited;
- a rejuvenated merge that pairs the forward predictive mixture with the
  time-i observation density and a *rejuvenation mixture* built from the
  time-(i+1) backward particles, so the time-i regime ranges over all
  values regardless of either filter's support.

Backward particles are stored one entry per *distinct* regime suffix with a
multiplicity count: the backward filter resamples at every step, so the
number of distinct suffixes is bounded by ``min(N, J^k)`` and shrinks fast;
all merge formulas only ever see group weights, which keeps the pairwise
merge cost proportional to distinct suffixes rather than particles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .ffbs import SmoothingMarginals
from .forward import ParticleCloud, forward_pass
from .kalman import (
    BackwardInfoStat,
    backward_info_fold,
    backward_info_prefold,
    backward_info_terminal,
    gaussian_backward_integral,
)
from .model import (
    LOG_2PI,
    ModelValidationError,
    NumericalError,
    RegimeModel,
    WeightedNormal,
    chol_with_jitter_batch,
    symmetrize,
)
from .sampling import categorical_from_logw, make_rng, normalize_log_weights


@dataclass(frozen=True)
class BackwardParticleCloud:
    """Distinct-suffix groups of the backward filter at one time step.

    The backward filter keeps per-particle weights exactly uniform and
    resamples every step, so many particles share a regime suffix and hence
    the exact same suffix statistic.  The cloud stores one entry per
    distinct suffix together with its multiplicity:

    - ``regimes``: regime at this time, per group;
    - ``parents``: index into the next-time cloud whose suffix this group
      continues (``-1`` at the final time);
    - ``counts``: particles carrying the suffix (sums to the particle count);
    - ``log_w``: aggregated normalized group weight, ``log(count / N)``;
    - ``stats``: information form of ``log p(y_{i:n} | suffix, z_i)``;
    - ``log_gamma_integral``: cached ``log`` of the artificial-density
      integral of the suffix statistic at this time and regime.
    """

    time_index: int
    regimes: np.ndarray
    parents: np.ndarray
    counts: np.ndarray
    log_w: np.ndarray
    stats: list[BackwardInfoStat]
    log_gamma_integral: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "regimes", np.asarray(self.regimes, dtype=np.int64))
        object.__setattr__(self, "parents", np.asarray(self.parents, dtype=np.int64))
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64))
        object.__setattr__(self, "log_w", np.asarray(self.log_w, dtype=float))
        object.__setattr__(
            self, "log_gamma_integral", np.asarray(self.log_gamma_integral, dtype=float)
        )
        G = self.regimes.shape[0]
        if G == 0:
            raise ModelValidationError("backward cloud must contain at least one group")
        for name in ("parents", "counts", "log_w", "log_gamma_integral"):
            if getattr(self, name).shape != (G,):
                raise ModelValidationError(f"backward cloud field {name} must have shape ({G},)")
        if len(self.stats) != G:
            raise ModelValidationError("backward cloud must carry one suffix statistic per group")
        if np.any(self.counts < 1):
            raise ModelValidationError("backward cloud group counts must be positive")
        total = logsumexp(self.log_w)
        if not np.isfinite(total) or abs(total) > 1e-8:
            raise ModelValidationError("backward cloud weights must normalize to 1")

    @property
    def size(self) -> int:
        """Number of distinct suffix groups."""
        return self.regimes.shape[0]

    @property
    def n_particles(self) -> int:
        """Total particle count across groups."""
        return int(self.counts.sum())


@dataclass(frozen=True)
class RejuvenationMixture:
    """Gaussian-form mixture approximating ``p(y_{i+1:n} | a_i, z_i)``.

    Built from the time-(i+1) backward cloud by integrating each group's
    suffix statistic against the state transition.  Its value is::

        t(a_i, z) = sum_g exp(log_coef[g] + log Q(a_i, regimes_next[g]))
                    * exp(-z' precision[g] z / 2 + z' shift[g])

    ``regimes_next`` is the time-(i+1) regime of each group; the dependence
    on ``a_i`` enters only through the transition probability, so the same
    mixture serves every candidate time-i regime.
    """

    time_index: int
    regimes_next: np.ndarray
    log_coef: np.ndarray
    precision: np.ndarray
    shift: np.ndarray

    @property
    def size(self) -> int:
        return self.regimes_next.shape[0]

    def log_eval(self, model: RegimeModel, regime: int, zs: np.ndarray) -> np.ndarray:
        """``log t(regime, z)`` evaluated at each row of ``zs`` (shape ``(L, m)``)."""
        zs = np.atleast_2d(np.asarray(zs, dtype=float))
        quad = -0.5 * np.einsum("lm,gmn,ln->gl", zs, self.precision, zs)
        quad += np.einsum("gm,lm->gl", self.shift, zs)
        log_w = self.log_coef + model.log_Q[regime, self.regimes_next]
        return logsumexp(log_w[:, None] + quad, axis=0)


def rejuvenation_mixture(model: RegimeModel, bwd_next: BackwardParticleCloud) -> RejuvenationMixture:
    """Integrate the time-(i+1) backward cloud against the state transition.

    For each suffix group with statistic ``(c, Pinv, nu)`` at regime ``b``,
    the transition integral has the closed form (all pieces at regime ``b``)::

        Delta = (I + H' Pinv H)^{-1}
        coef  = w / (D * exp(c/2)) * |Hbar|^{-1/2} |H Delta H'|^{1/2}
                * exp(-d' Hbar^{-1} d / 2) * exp(r' (H Delta H') r / 2),
                r = nu + Hbar^{-1} d
        precision = T' Hbar^{-1} (T - H Delta H' Hbar^{-1} T)
        shift     = T' Hbar^{-1} (H Delta H' r - d)

    where ``w`` is the group weight and ``D`` its cached artificial-density
    integral.  ``H Delta H' = (Hbar^{-1} + Pinv)^{-1}`` is positive definite
    because the state noise covariance is.
    """
    bb = bwd_next.regimes
    G = bwd_next.size
    m = model.state_dim
    Pinv = np.stack([stat.info_precision for stat in bwd_next.stats])
    nu = np.stack([stat.info_shift for stat in bwd_next.stats])
    carry = np.array([stat.log_carry_constant for stat in bwd_next.stats])

    H = model.H[bb]
    Hbar_inv = model.Hbar_inv[bb]
    T = model.T[bb]
    d = model.d[bb]

    delta = np.linalg.inv(np.eye(m)[None] + np.einsum("gji,gjk,gkl->gil", H, Pinv, H))
    hdh = symmetrize(np.einsum("gij,gjk,glk->gil", H, delta, H))
    chol_hdh = chol_with_jitter_batch(hdh, label="backward transition covariance")
    logdet_hdh = 2.0 * np.sum(np.log(np.diagonal(chol_hdh, axis1=1, axis2=2)), axis=1)

    r = nu + np.einsum("gij,gj->gi", Hbar_inv, d)
    d_quad = np.einsum("gi,gij,gj->g", d, Hbar_inv, d)
    r_quad = np.einsum("gi,gij,gj->g", r, hdh, r)
    log_coef = (
        bwd_next.log_w
        - bwd_next.log_gamma_integral
        - 0.5 * carry
        - 0.5 * model.logdet_Hbar[bb]
        + 0.5 * logdet_hdh
        - 0.5 * d_quad
        + 0.5 * r_quad
    )

    inner = T - np.einsum("gij,gjk,gkl->gil", hdh, Hbar_inv, T)
    precision = symmetrize(np.einsum("gji,gjk,gkl->gil", T, Hbar_inv, inner))
    shift = np.einsum(
        "gji,gj->gi", T, np.einsum("gij,gj->gi", Hbar_inv, np.einsum("gij,gj->gi", hdh, r) - d)
    )
    return RejuvenationMixture(
        time_index=bwd_next.time_index - 1,
        regimes_next=bb.copy(),
        log_coef=log_coef,
        precision=precision,
        shift=shift,
    )


@dataclass(frozen=True)
class ForwardPredictiveMixture:
    """One-step predictive mixture ``p(a_i, z_i | y_{1:i-1})`` from a filter cloud.

    Component ``(k, j)`` is particle ``k`` moved to regime ``j``::

        log_w[k, j] = log w_k + log Q(a_k, j)
        mean[k, j]  = d_j + T_j mu_k
        cov[k, j]   = T_j P_k T_j' + Hbar_j

    At the first time there is no cloud and the mixture is the prior
    (a single component per regime); see :func:`prior_predictive_mixture`.
    """

    time_index: int
    log_w: np.ndarray
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        K, J = self.log_w.shape
        m = self.mean.shape[-1]
        if self.mean.shape != (K, J, m) or self.cov.shape != (K, J, m, m):
            raise ModelValidationError("forward predictive mixture fields have inconsistent shapes")

    @property
    def n_components(self) -> int:
        return self.log_w.shape[0]


def prior_predictive_mixture(model: RegimeModel) -> ForwardPredictiveMixture:
    """The time-0 'predictive': the prior over ``(a_1, z_1)``."""
    J, m = model.n_regimes, model.state_dim
    return ForwardPredictiveMixture(
        time_index=0,
        log_w=model.log_pi[None, :].copy(),
        mean=np.broadcast_to(model.mu1, (1, J, m)).copy(),
        cov=np.broadcast_to(model.Sigma1, (1, J, m, m)).copy(),
    )


def forward_predictive_mixture(model: RegimeModel, cloud: ParticleCloud) -> ForwardPredictiveMixture:
    """Predictive mixture for the time step after ``cloud``."""
    log_w = cloud.log_w[:, None] + model.log_Q[cloud.regimes, :]
    mean = model.d[None, :, :] + np.einsum("jab,kb->kja", model.T, cloud.mu)
    cov = np.einsum("jab,kbc,jdc->kjad", model.T, cloud.P, model.T) + model.Hbar[None]
    return ForwardPredictiveMixture(
        time_index=cloud.time_index + 1, log_w=log_w, mean=mean, cov=symmetrize(cov)
    )


@dataclass(frozen=True)
class ArtificialDensitySchedule:
    """Per-time, per-regime Gaussian mixtures guiding the backward filter.

    ``components[i][j]`` lists the mixture components of the artificial
    joint density at time ``i`` and regime ``j`` (an empty list means the
    regime carries no artificial mass there).  Component log weights are
    joint over regime and component: they sum to one per time step.
    """

    components: list[list[list[WeightedNormal]]]

    def __post_init__(self):
        if not self.components:
            raise ModelValidationError("artificial density schedule must cover at least one time")
        J = len(self.components[0])
        for i, per_regime in enumerate(self.components):
            if len(per_regime) != J:
                raise ModelValidationError("artificial density schedule must cover every regime at every time")
            log_ws = [comp.log_w for regime in per_regime for comp in regime]
            total = logsumexp(np.asarray(log_ws)) if log_ws else -np.inf
            if not np.isfinite(total) or abs(total) > 1e-6:
                raise ModelValidationError(f"artificial density weights at time {i} must sum to 1")
            for regime in per_regime:
                for comp in regime:
                    try:
                        np.linalg.cholesky(comp.cov)
                    except np.linalg.LinAlgError as exc:
                        raise ModelValidationError(
                            f"artificial density covariance at time {i} is not positive definite"
                        ) from exc

    @property
    def n_times(self) -> int:
        return len(self.components)

    @property
    def n_regimes(self) -> int:
        return len(self.components[0])

    def log_integral(self, time: int, regime: int, stat: BackwardInfoStat) -> float:
        """``log`` integral of the suffix statistic against the mixture at ``(time, regime)``."""
        comps = self.components[time][regime]
        if not comps:
            return -np.inf
        vals = [
            comp.log_w + gaussian_backward_integral(comp.mean, comp.cov, stat) for comp in comps
        ]
        return float(logsumexp(np.asarray(vals)))


def _moment_matched(log_w: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> WeightedNormal:
    """Collapse a mixture (joint log weights) to one component preserving mean and covariance."""
    total = logsumexp(log_w)
    rel = np.exp(log_w - total)
    mixed_mean = rel @ mean
    centered = mean - mixed_mean
    mixed_cov = np.einsum("k,kab->ab", rel, cov) + np.einsum("k,ka,kb->ab", rel, centered, centered)
    return WeightedNormal(log_w=float(total), mean=mixed_mean, cov=symmetrize(mixed_cov))


def default_gamma_schedule(
    model: RegimeModel, clouds: list[ParticleCloud], compress: bool = True
) -> ArtificialDensitySchedule:
    """Artificial densities from the forward pass's predictive mixtures.

    Time 0 uses the prior over ``(a_1, z_1)``.  Every later time uses the
    predictive mixture of the previous cloud, by default compressed to one
    moment-matched Gaussian per regime (``compress=False`` keeps the full
    per-particle mixture).
    """
    J = model.n_regimes
    per_time: list[list[list[WeightedNormal]]] = []
    for i in range(len(clouds)):
        mixture = (
            prior_predictive_mixture(model)
            if i == 0
            else forward_predictive_mixture(model, clouds[i - 1])
        )
        per_regime: list[list[WeightedNormal]] = []
        for j in range(J):
            log_w = mixture.log_w[:, j]
            keep = np.flatnonzero(np.isfinite(log_w))
            if keep.size == 0:
                per_regime.append([])
            elif compress:
                per_regime.append(
                    [_moment_matched(log_w[keep], mixture.mean[keep, j], mixture.cov[keep, j])]
                )
            else:
                per_regime.append(
                    [
                        WeightedNormal(
                            log_w=float(log_w[k]), mean=mixture.mean[k, j], cov=mixture.cov[k, j]
                        )
                        for k in keep
                    ]
                )
        per_time.append(per_regime)
    return ArtificialDensitySchedule(components=per_time)


def backward_filter_pass(
    model: RegimeModel,
    ys: np.ndarray,
    schedule: ArtificialDensitySchedule,
    n_particles: int,
    rng: int | np.random.Generator | None = 0,
) -> list[BackwardParticleCloud]:
    """Auxiliary backward particle filter over regime suffixes.

    Fully adapted: at the final time regimes are drawn proportionally to the
    artificial-density integral of the observation term; at every earlier
    time a first-stage resampling by the total candidate mass is followed by
    an exact draw of the time-i regime, so per-particle weights stay uniform
    throughout.  Returns one cloud per time step, in time order.
    """
    if n_particles < 1:
        raise ModelValidationError("backward particle count must be at least 1")
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n = ys.shape[0]
    if schedule.n_times != n:
        raise ModelValidationError(
            f"artificial density schedule covers {schedule.n_times} times, data has {n}"
        )
    rng = make_rng(rng)
    J = model.n_regimes

    terminal_stats = [backward_info_terminal(model, j, ys[-1]) for j in range(J)]
    log_D = np.array([schedule.log_integral(n - 1, j, terminal_stats[j]) for j in range(J)])
    draws = categorical_from_logw(log_D, n_particles, rng, time_index=n - 1)
    counts = np.bincount(draws, minlength=J)
    keep = np.flatnonzero(counts)
    cloud = BackwardParticleCloud(
        time_index=n - 1,
        regimes=keep,
        parents=np.full(keep.size, -1),
        counts=counts[keep],
        log_w=np.log(counts[keep] / n_particles),
        stats=[terminal_stats[j] for j in keep],
        log_gamma_integral=log_D[keep],
    )
    clouds = [cloud]

    for t in range(n - 2, -1, -1):
        cloud = clouds[-1]
        G = cloud.size
        cand_stats: list[list[BackwardInfoStat | None]] = []
        log_u = np.full((G, J), -np.inf)
        log_D_cand = np.full((G, J), -np.inf)
        for g in range(G):
            parent_regime = int(cloud.regimes[g])
            carry, precision, shift = backward_info_prefold(model, cloud.stats[g], parent_regime)
            row: list[BackwardInfoStat | None] = []
            for a in range(J):
                log_q = model.log_Q[a, parent_regime]
                if not np.isfinite(log_q):
                    row.append(None)
                    continue
                stat = backward_info_fold(model, carry, precision, shift, a, ys[t])
                row.append(stat)
                log_D_cand[g, a] = schedule.log_integral(t, a, stat)
                log_u[g, a] = log_q + log_D_cand[g, a] - cloud.log_gamma_integral[g]
            cand_stats.append(row)

        log_v = logsumexp(log_u, axis=1)
        try:
            ancestors = categorical_from_logw(cloud.log_w + log_v, n_particles, rng, time_index=t)
        except NumericalError as exc:
            raise NumericalError(
                "backward filter weights degenerated", time_index=t
            ) from exc
        anc_counts = np.bincount(ancestors, minlength=G)

        regimes, parents, counts_new, stats_new, log_D_new = [], [], [], [], []
        for g in np.flatnonzero(anc_counts):
            sub_draws = categorical_from_logw(log_u[g], int(anc_counts[g]), rng, time_index=t)
            sub = np.bincount(sub_draws, minlength=J)
            for a in np.flatnonzero(sub):
                regimes.append(a)
                parents.append(g)
                counts_new.append(int(sub[a]))
                stats_new.append(cand_stats[g][a])
                log_D_new.append(log_D_cand[g, a])
        counts_arr = np.asarray(counts_new, dtype=np.int64)
        clouds.append(
            BackwardParticleCloud(
                time_index=t,
                regimes=np.asarray(regimes, dtype=np.int64),
                parents=np.asarray(parents, dtype=np.int64),
                counts=counts_arr,
                log_w=np.log(counts_arr / n_particles),
                stats=stats_new,
                log_gamma_integral=np.asarray(log_D_new, dtype=float),
            )
        )
    clouds.reverse()
    return clouds


@dataclass(frozen=True)
class MergedMarginal:
    """Smoothing marginal at one time: regime probabilities and state moments."""

    regime_probs: np.ndarray
    state_mean: np.ndarray
    state_cov: np.ndarray


def _forward_quadform_parts(
    mixture: ForwardPredictiveMixture,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quadratic-form fields ``(A, b, c)`` of every ``(k, j)`` mixture component."""
    m = mixture.mean.shape[-1]
    chol = chol_with_jitter_batch(mixture.cov, label="predictive covariance")
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    A = np.linalg.inv(mixture.cov)
    A = symmetrize(A)
    b = np.einsum("kjab,kjb->kja", A, mixture.mean)
    with np.errstate(invalid="ignore"):
        c = np.einsum("kja,kja->kj", mixture.mean, b) + m * LOG_2PI + logdet - 2.0 * mixture.log_w
    return A, b, c


def _batched_quadform_stats(
    A: np.ndarray, b: np.ndarray, c: np.ndarray, time_index: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Log integral, mean and covariance of batched quadratic forms."""
    m = b.shape[-1]
    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise NumericalError(
            "merged quadratic form is not positive definite", time_index=time_index
        )
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    mean = np.linalg.solve(A, b[..., None])[..., 0]
    quad = np.einsum("...a,...a->...", b, mean)
    with np.errstate(invalid="ignore"):
        log_integral = 0.5 * (m * LOG_2PI - logdet + quad - c)
    cov = symmetrize(np.linalg.inv(A))
    return log_integral, mean, cov


def _mixture_marginal(
    pieces: list[tuple[int, np.ndarray, np.ndarray, np.ndarray]],
    n_regimes: int,
    state_dim: int,
    time_index: int,
) -> MergedMarginal:
    """Normalize per-regime component lists into one merged marginal."""
    flat_logw = np.concatenate([logw.reshape(-1) for _, logw, _, _ in pieces])
    log_norm, _ = normalize_log_weights(flat_logw, time_index=time_index)
    probs = np.exp(log_norm)
    regime_probs = np.zeros(n_regimes)
    state_mean = np.zeros(state_dim)
    second_moment = np.zeros((state_dim, state_dim))
    offset = 0
    for j, logw, mean, cov in pieces:
        block = probs[offset : offset + logw.size]
        offset += logw.size
        regime_probs[j] += float(block.sum())
        mean_flat = mean.reshape(-1, state_dim)
        cov_flat = cov.reshape(-1, state_dim, state_dim)
        state_mean += np.einsum("k,ka->a", block, mean_flat)
        second_moment += np.einsum("k,kab->ab", block, cov_flat)
        second_moment += np.einsum("k,ka,kb->ab", block, mean_flat, mean_flat)
    state_cov = symmetrize(second_moment - np.outer(state_mean, state_mean))
    return MergedMarginal(regime_probs=regime_probs, state_mean=state_mean, state_cov=state_cov)


def merge_plain(
    model: RegimeModel, fwd: ForwardPredictiveMixture, bwd: BackwardParticleCloud
) -> MergedMarginal:
    """Combine the forward predictive mixture with same-time backward particles.

    The backward statistics already contain the time-i observation density,
    so the product needs no extra observation factor; the regime support is
    restricted to values the backward pass sampled.
    """
    if fwd.time_index != bwd.time_index:
        raise ModelValidationError("forward mixture and backward cloud are at different times")
    A_f, b_f, c_f = _forward_quadform_parts(fwd)
    A_b = np.stack([stat.info_precision for stat in bwd.stats])
    b_b = np.stack([stat.info_shift for stat in bwd.stats])
    c_b = (
        np.array([stat.log_carry_constant for stat in bwd.stats])
        + 2.0 * bwd.log_gamma_integral
        - 2.0 * bwd.log_w
    )
    pieces = []
    for j in range(model.n_regimes):
        sel = np.flatnonzero(bwd.regimes == j)
        if sel.size == 0:
            continue
        A = A_f[:, j][:, None] + A_b[sel][None]
        b = b_f[:, j][:, None] + b_b[sel][None]
        c = c_f[:, j][:, None] + c_b[sel][None]
        log_integral, mean, cov = _batched_quadform_stats(A, b, c, fwd.time_index)
        pieces.append((j, log_integral, mean, cov))
    return _mixture_marginal(pieces, model.n_regimes, model.state_dim, fwd.time_index)


def merge_rejuvenated(
    model: RegimeModel,
    fwd: ForwardPredictiveMixture,
    rej: RejuvenationMixture | None,
    y: np.ndarray,
) -> MergedMarginal:
    """Combine the forward predictive mixture, the time-i observation density
    and the rejuvenation mixture built from time-(i+1) backward particles.

    The time-i regime ranges over all values: the backward particles enter
    only through transition probabilities, so regimes neither filter sampled
    still receive mass.  At the final time there is no rejuvenation mixture
    and the merge reduces to the filtered marginal.
    """
    y = np.asarray(y, dtype=float)
    if rej is not None and rej.time_index != fwd.time_index:
        raise ModelValidationError("forward mixture and rejuvenation mixture are at different times")
    A_f, b_f, c_f = _forward_quadform_parts(fwd)
    pieces = []
    for j in range(model.n_regimes):
        obs = backward_info_terminal(model, j, y)
        if rej is None:
            A = A_f[:, j] + obs.info_precision[None]
            b = b_f[:, j] + obs.info_shift[None]
            c = c_f[:, j] + obs.log_carry_constant
        else:
            log_w_rej = rej.log_coef + model.log_Q[j, rej.regimes_next]
            A = A_f[:, j][:, None] + obs.info_precision[None, None] + rej.precision[None]
            b = b_f[:, j][:, None] + obs.info_shift[None, None] + rej.shift[None]
            c = c_f[:, j][:, None] + obs.log_carry_constant - 2.0 * log_w_rej[None]
        log_integral, mean, cov = _batched_quadform_stats(A, b, c, fwd.time_index)
        pieces.append((j, log_integral, mean, cov))
    return _mixture_marginal(pieces, model.n_regimes, model.state_dim, fwd.time_index)


@dataclass(frozen=True)
class TwoFilterResult:
    """Smoothing marginals plus the forward filter's evidence estimate."""

    marginals: SmoothingMarginals
    log_evidence: float


def smooth_two_filter(
    model: RegimeModel,
    ys: np.ndarray,
    n_particles: int,
    n_backward: int | None = None,
    scheme: str = "KL-OS",
    rng: int | np.random.Generator | None = 0,
    rejuvenate: bool = True,
    compress_gamma: bool = True,
) -> TwoFilterResult:
    """Run forward filter, backward filter and per-time merges end to end.

    ``n_backward`` defaults to ``n_particles``.  With ``rejuvenate`` the
    merge at each non-final time pairs the forward predictive mixture with
    the observation density and the rejuvenation mixture; otherwise the
    plain product with same-time backward particles is used.
    """
    rng = make_rng(rng)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n = ys.shape[0]
    clouds = forward_pass(model, ys, n_particles, scheme, rng)
    schedule = default_gamma_schedule(model, clouds, compress=compress_gamma)
    bwd = backward_filter_pass(model, ys, schedule, n_backward or n_particles, rng)

    J, m = model.n_regimes, model.state_dim
    regime_probs = np.empty((n, J))
    means = np.empty((n, m))
    covs = np.empty((n, m, m))
    for t in range(n):
        fwd = (
            prior_predictive_mixture(model)
            if t == 0
            else forward_predictive_mixture(model, clouds[t - 1])
        )
        if rejuvenate:
            rej = rejuvenation_mixture(model, bwd[t + 1]) if t < n - 1 else None
            merged = merge_rejuvenated(model, fwd, rej, ys[t])
        else:
            merged = merge_plain(model, fwd, bwd[t])
        regime_probs[t] = merged.regime_probs
        means[t] = merged.state_mean
        covs[t] = merged.state_cov
    marginals = SmoothingMarginals(regime_probs=regime_probs, state_means=means, state_covs=covs)
    return TwoFilterResult(marginals=marginals, log_evidence=clouds[-1].log_norm_const)
