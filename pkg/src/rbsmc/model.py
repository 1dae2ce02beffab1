"""Regime-switching conditionally linear Gaussian state-space models.

A model has a hidden Markov regime chain ``a_i`` on ``{0, ..., J-1}`` and,
conditionally on the regimes, a linear Gaussian state-space pair::

    z_i = d[a_i] + T[a_i] @ z_{i-1} + H[a_i] @ eps_i      (state, dim m)
    y_i = c[a_i] + B[a_i] @ z_i     + G[a_i] @ eta_i      (observation, dim p)

with ``eps_i, eta_i`` independent standard normal vectors.  ``H`` and ``G``
are noise *factors*: the state and observation noise covariances are
``Hbar = H @ H.T`` and ``Gbar = G @ G.T``.  The chain starts from ``pi`` with
transition matrix ``Q``, and the initial state is ``z_1 ~ N(mu1, Sigma1)``
(so the time-1 state equation is not used).

This module also provides the small algebra of unnormalized Gaussian
quadratic forms ``exp(-z'Az/2 + z'b - c/2)`` that the smoothers are built on.

Regime indices are 0-based everywhere in this package.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

LOG_2PI = math.log(2.0 * math.pi)


class ModelValidationError(ValueError):
    """Raised when model parameters or input data fail validation."""


class NumericalError(RuntimeError):
    """Raised when a computation degenerates (non-PD matrix, all-zero weights).

    Where the failure is tied to a time step, ``time_index`` records it
    (0-based) so callers can report which observation broke the run.
    """

    def __init__(self, message: str, time_index: int | None = None):
        if time_index is not None:
            message = f"{message} (time index {time_index})"
        super().__init__(message)
        self.time_index = time_index


def symmetrize(mat: np.ndarray) -> np.ndarray:
    """Return the symmetric part of ``mat`` (use after covariance updates)."""
    return 0.5 * (mat + np.swapaxes(mat, -1, -2))


def chol_with_jitter(mat: np.ndarray, label: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of ``mat``, retrying with escalating jitter.

    On failure adds ``jitter * I`` with jitter starting at
    ``1e-12 * trace/m`` and growing tenfold up to ``1e-6 * trace/m`` before
    raising :class:`NumericalError`.
    """
    mat = np.asarray(mat, dtype=float)
    m = mat.shape[-1]
    scale = float(np.trace(mat)) / max(m, 1)
    if not math.isfinite(scale) or scale <= 0.0:
        scale = 1.0
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(mat + jitter * np.eye(m))
        except np.linalg.LinAlgError:
            if jitter == 0.0:
                jitter = 1e-12 * scale
            elif jitter < 1e-6 * scale:
                jitter *= 10.0
            else:
                raise NumericalError(f"Cholesky failed for {label}: matrix is not positive definite")


def chol_with_jitter_batch(mats: np.ndarray, label: str = "matrix") -> np.ndarray:
    """Batched :func:`chol_with_jitter` over stacked ``(..., m, m)`` inputs."""
    try:
        return np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        pass
    flat = mats.reshape(-1, mats.shape[-2], mats.shape[-1])
    out = np.empty_like(flat)
    for i, mat in enumerate(flat):
        out[i] = chol_with_jitter(mat, label=label)
    return out.reshape(mats.shape)


def mahalanobis_sq(vec: np.ndarray, mat: np.ndarray) -> float:
    """Squared norm ``vec' @ inv(mat) @ vec``.

    This is the single place that fixes the convention used throughout:
    a squared norm subscripted by a covariance matrix means the quadratic
    form in the *inverse* of that matrix.
    """
    vec = np.asarray(vec, dtype=float)
    chol = chol_with_jitter(mat, label="norm matrix")
    half = solve_triangular(chol, vec, lower=True)
    return float(half @ half)


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Log density of ``N(mean, cov)`` at ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    k = x.shape[0]
    chol = chol_with_jitter(cov, label="covariance")
    half = solve_triangular(chol, x - mean, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (k * LOG_2PI + logdet + float(half @ half))


def _as_matrix_stack(arr, shape, name):
    out = np.asarray(arr, dtype=float)
    if out.shape != shape:
        raise ModelValidationError(f"{name} must have shape {shape}, got {out.shape}")
    return out


@dataclass
class RegimeModel:
    """Parameter container with validation and precomputed derived arrays.

    Shapes (J regimes, state dim m, observation dim p):

    - ``pi``   (J,)      initial regime probabilities
    - ``Q``    (J, J)    regime transition matrix, rows sum to 1
    - ``d``    (J, m)    state intercepts
    - ``T``    (J, m, m) state transition matrices
    - ``H``    (J, m, m) state noise factors, covariance ``H @ H.T``
    - ``c``    (J, p)    observation intercepts
    - ``B``    (J, p, m) observation matrices
    - ``G``    (J, p, p) observation noise factors, covariance ``G @ G.T``
    - ``mu1``  (m,)      initial state mean
    - ``Sigma1`` (m, m)  initial state covariance
    """

    pi: np.ndarray
    Q: np.ndarray
    d: np.ndarray
    T: np.ndarray
    H: np.ndarray
    c: np.ndarray
    B: np.ndarray
    G: np.ndarray
    mu1: np.ndarray
    Sigma1: np.ndarray

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        if self.pi.ndim != 1 or self.pi.size == 0:
            raise ModelValidationError("pi must be a non-empty 1-d array")
        J = self.pi.shape[0]
        self.Q = _as_matrix_stack(self.Q, (J, J), "Q")
        self.d = np.asarray(self.d, dtype=float)
        if self.d.ndim != 2 or self.d.shape[0] != J:
            raise ModelValidationError(f"d must have shape (J={J}, m), got {self.d.shape}")
        m = self.d.shape[1]
        self.T = _as_matrix_stack(self.T, (J, m, m), "T")
        self.H = _as_matrix_stack(self.H, (J, m, m), "H")
        self.c = np.asarray(self.c, dtype=float)
        if self.c.ndim != 2 or self.c.shape[0] != J:
            raise ModelValidationError(f"c must have shape (J={J}, p), got {self.c.shape}")
        p = self.c.shape[1]
        self.B = _as_matrix_stack(self.B, (J, p, m), "B")
        self.G = _as_matrix_stack(self.G, (J, p, p), "G")
        self.mu1 = _as_matrix_stack(self.mu1, (m,), "mu1")
        self.Sigma1 = _as_matrix_stack(self.Sigma1, (m, m), "Sigma1")

        if np.any(self.pi < 0.0) or abs(float(self.pi.sum()) - 1.0) > 1e-9:
            raise ModelValidationError("pi must be nonnegative and sum to 1")
        if np.any(self.Q < 0.0) or np.any(np.abs(self.Q.sum(axis=1) - 1.0) > 1e-9):
            raise ModelValidationError("each row of Q must be nonnegative and sum to 1")
        if np.max(np.abs(self.Sigma1 - self.Sigma1.T)) > 1e-8:
            raise ModelValidationError("Sigma1 must be symmetric")

        # Model noise covariances must be strictly positive definite; no
        # jitter rescue here (that is reserved for drifting runtime covariances).
        self.chol_Sigma1 = _validation_cholesky(self.Sigma1, "Sigma1")
        self.Hbar = symmetrize(np.einsum("jab,jcb->jac", self.H, self.H))
        self.Gbar = symmetrize(np.einsum("jab,jcb->jac", self.G, self.G))
        self.chol_Hbar = np.empty_like(self.Hbar)
        self.chol_Gbar = np.empty_like(self.Gbar)
        for j in range(J):
            self.chol_Hbar[j] = _validation_cholesky(self.Hbar[j], f"state noise covariance of regime {j}")
            self.chol_Gbar[j] = _validation_cholesky(self.Gbar[j], f"observation noise covariance of regime {j}")
        self.logdet_Hbar = 2.0 * np.sum(np.log(np.diagonal(self.chol_Hbar, axis1=1, axis2=2)), axis=1)
        self.logdet_Gbar = 2.0 * np.sum(np.log(np.diagonal(self.chol_Gbar, axis1=1, axis2=2)), axis=1)

        eye_m = np.eye(m)
        eye_p = np.eye(p)
        self.Hbar_inv = np.stack([_chol_inverse(self.chol_Hbar[j], eye_m) for j in range(J)])
        self.Gbar_inv = np.stack([_chol_inverse(self.chol_Gbar[j], eye_p) for j in range(J)])
        # B' Gbar^{-1} and B' Gbar^{-1} B appear in every backward recursion.
        self.Bt_Ginv = np.einsum("jpa,jpq->jaq", self.B, self.Gbar_inv)
        self.Bt_Ginv_B = symmetrize(np.einsum("jaq,jqb->jab", self.Bt_Ginv, self.B))

        with np.errstate(divide="ignore"):
            self.log_pi = np.log(self.pi)
            self.log_Q = np.log(self.Q)

    @property
    def n_regimes(self) -> int:
        return self.pi.shape[0]

    @property
    def state_dim(self) -> int:
        return self.d.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.c.shape[1]

    def to_json(self) -> str:
        payload = {
            key: getattr(self, key).tolist()
            for key in ("pi", "Q", "d", "T", "H", "c", "B", "G", "mu1", "Sigma1")
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str | dict) -> "RegimeModel":
        payload = json.loads(text) if isinstance(text, str) else text
        required = {"pi", "Q", "d", "T", "H", "c", "B", "G", "mu1", "Sigma1"}
        missing = required - payload.keys()
        if missing:
            raise ModelValidationError(f"model JSON is missing keys: {sorted(missing)}")
        return cls(**{key: np.asarray(payload[key], dtype=float) for key in required})


def _chol_inverse(chol: np.ndarray, eye: np.ndarray) -> np.ndarray:
    half = solve_triangular(chol, eye, lower=True)
    return symmetrize(half.T @ half)


def _validation_cholesky(mat: np.ndarray, name: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise ModelValidationError(f"{name} is not positive definite") from exc


def transition_logdensity(model: RegimeModel, a_i: int, z_prev: np.ndarray, z: np.ndarray) -> float:
    """Log density of the state move ``z_prev -> z`` under regime ``a_i``."""
    resid = np.asarray(z, dtype=float) - model.d[a_i] - model.T[a_i] @ np.asarray(z_prev, dtype=float)
    half = solve_triangular(model.chol_Hbar[a_i], resid, lower=True)
    return -0.5 * (model.state_dim * LOG_2PI + model.logdet_Hbar[a_i] + float(half @ half))


def observation_logdensity(model: RegimeModel, a_i: int, z: np.ndarray, y: np.ndarray) -> float:
    """Log density of observation ``y`` given state ``z`` under regime ``a_i``."""
    resid = np.asarray(y, dtype=float) - model.c[a_i] - model.B[a_i] @ np.asarray(z, dtype=float)
    half = solve_triangular(model.chol_Gbar[a_i], resid, lower=True)
    return -0.5 * (model.obs_dim * LOG_2PI + model.logdet_Gbar[a_i] + float(half @ half))


@dataclass(frozen=True)
class WeightedNormal:
    """One mixture component: ``log_w`` plus Gaussian ``(mean, cov)``."""

    log_w: float
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class GaussianQuadForm:
    """Unnormalized Gaussian integrand ``exp(-z'Az/2 + z'b - c/2)``.

    ``A`` is symmetric; it need not be positive definite (backward
    information matrices are typically rank deficient), but integration
    requires it to be.
    """

    A: np.ndarray
    b: np.ndarray
    c: float

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
            raise ModelValidationError(f"quadratic form shapes are inconsistent: A {A.shape}, b {b.shape}")
        if A.size and np.max(np.abs(A - A.T)) > 1e-12 * max(1.0, float(np.max(np.abs(A)))):
            raise ModelValidationError("quadratic form matrix must be symmetric")
        object.__setattr__(self, "A", symmetrize(A))
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", float(self.c))

    def log_value(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=float)
        return float(-0.5 * z @ self.A @ z + z @ self.b - 0.5 * self.c)


def quadform_product(first: GaussianQuadForm, second: GaussianQuadForm) -> GaussianQuadForm:
    """Pointwise product of two quadratic-form integrands (fields add)."""
    return GaussianQuadForm(first.A + second.A, first.b + second.b, first.c + second.c)


def quadform_integral(form: GaussianQuadForm) -> float:
    """Log of the integral of the form over its whole space.

    Equals ``(m/2) log 2pi - log|A|/2 + b'A^{-1}b/2 - c/2``; requires a
    positive definite ``A`` and raises :class:`NumericalError` otherwise.
    """
    m = form.b.shape[0]
    try:
        chol = np.linalg.cholesky(form.A)
    except np.linalg.LinAlgError:
        raise NumericalError("quadratic form is not normalizable: A is not positive definite")
    half = solve_triangular(chol, form.b, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return 0.5 * (m * LOG_2PI - logdet + float(half @ half) - form.c)


def quadform_from_weighted_normal(component: WeightedNormal) -> GaussianQuadForm:
    """Quadratic form equal to ``exp(log_w) * N(z; mean, cov)`` pointwise."""
    mean = np.asarray(component.mean, dtype=float)
    cov = np.asarray(component.cov, dtype=float)
    m = mean.shape[0]
    chol = chol_with_jitter(cov, label="component covariance")
    half = solve_triangular(chol, mean, lower=True)
    precision_mean = solve_triangular(chol.T, half, lower=False)
    eye = np.eye(m)
    precision = _chol_inverse(chol, eye)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    const = float(half @ half) + m * LOG_2PI + logdet - 2.0 * component.log_w
    return GaussianQuadForm(precision, precision_mean, const)


def quadform_moments(form: GaussianQuadForm) -> tuple[np.ndarray, np.ndarray]:
    """Mean ``A^{-1}b`` and covariance ``A^{-1}`` of the normalized form."""
    chol = chol_with_jitter(form.A, label="quadratic form")
    eye = np.eye(form.b.shape[0])
    cov = _chol_inverse(chol, eye)
    return cov @ form.b, cov


def simulate(model: RegimeModel, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw ``(regimes, states, observations)`` of length ``n`` from the model.

    Returns arrays of shapes ``(n,)``, ``(n, m)`` and ``(n, p)``.
    """
    if n < 1:
        raise ModelValidationError("simulation length must be at least 1")
    J, m, p = model.n_regimes, model.state_dim, model.obs_dim
    regimes = np.empty(n, dtype=np.int64)
    states = np.empty((n, m))
    obs = np.empty((n, p))

    cum_pi = np.cumsum(model.pi)
    cum_Q = np.cumsum(model.Q, axis=1)
    regimes[0] = int(np.searchsorted(cum_pi, rng.random() * cum_pi[-1], side="right").clip(0, J - 1))
    states[0] = model.mu1 + model.chol_Sigma1 @ rng.standard_normal(m)
    for i in range(1, n):
        row = cum_Q[regimes[i - 1]]
        regimes[i] = int(np.searchsorted(row, rng.random() * row[-1], side="right").clip(0, J - 1))
        a = regimes[i]
        states[i] = model.d[a] + model.T[a] @ states[i - 1] + model.H[a] @ rng.standard_normal(m)
    for i in range(n):
        a = regimes[i]
        obs[i] = model.c[a] + model.B[a] @ states[i] + model.G[a] @ rng.standard_normal(p)
    return regimes, states, obs
