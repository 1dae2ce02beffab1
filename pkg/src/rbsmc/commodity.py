"""Two-factor regime-switching commodity model: log spot price and
convenience yield.

Continuous dynamics (regime-indexed volatilities and equilibrium yield)::

    d ln S_t = (r - delta_t - sigma^2/2) dt + sigma dW1_t
    d delta_t = kappa (alpha - delta_t) dt + eta dW2_t,   corr(dW1, dW2) = rho

The pair ``Z = (ln S, delta)`` integrates exactly over a step of length
``h``, giving a discrete linear Gaussian transition whose coefficients are
closed-form in ``(kappa, alpha, sigma, eta, rho, r, h)``.  Futures log
prices are affine in ``Z`` with maturity-dependent loadings computed by a
term-structure recursion over weekly steps, which yields a regime-switching
conditionally linear Gaussian model for a panel of contracts.

Regime timing: the continuous model freezes the regime over each sampling
interval; the package's state-space convention indexes the transition into
time ``i`` by the time-``i`` regime variable.  Because the transition matrix
here does not depend on the regime (only the intercept and noise do), this
is a pure relabeling of the chain.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .model import ModelValidationError, RegimeModel

DEFAULT_INTEREST_RATE = 0.0296
DEFAULT_SAMPLING_PERIOD = 1.0 / 52.0
DEFAULT_MATURITIES = (4, 16, 26, 56)


@dataclass(frozen=True)
class TwoFactorParams:
    """Parameters of the two-factor futures model.

    ``alpha``, ``sigma``, ``eta``, ``rho`` are per-regime arrays; ``g`` holds
    one observation noise standard deviation per contract; ``r`` is the
    interest rate playing the drift role in the spot equation; ``tau`` the
    sampling period in years.
    """

    kappa: float
    alpha: np.ndarray
    sigma: np.ndarray
    eta: np.ndarray
    rho: np.ndarray
    g: np.ndarray
    Q: np.ndarray
    pi: np.ndarray
    mu1: np.ndarray
    Sigma1: np.ndarray
    r: float = DEFAULT_INTEREST_RATE
    tau: float = DEFAULT_SAMPLING_PERIOD

    def __post_init__(self):
        for name in ("alpha", "sigma", "eta", "rho", "g", "Q", "pi", "mu1", "Sigma1"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "tau", float(self.tau))
        J = self.alpha.shape[0] if self.alpha.ndim == 1 else 0
        if J == 0:
            raise ModelValidationError("alpha must be a non-empty 1-d array")
        for name in ("sigma", "eta", "rho"):
            if getattr(self, name).shape != (J,):
                raise ModelValidationError(f"{name} must have shape ({J},)")
        if self.g.ndim != 1 or self.g.size == 0:
            raise ModelValidationError("g must be a non-empty 1-d array")
        if self.Q.shape != (J, J):
            raise ModelValidationError(f"Q must have shape ({J}, {J})")
        if self.pi.shape != (J,):
            raise ModelValidationError(f"pi must have shape ({J},)")
        if self.mu1.shape != (2,) or self.Sigma1.shape != (2, 2):
            raise ModelValidationError("mu1 must have shape (2,) and Sigma1 shape (2, 2)")
        if not (self.kappa > 0.0):
            raise ModelValidationError("kappa must be positive")
        if not (self.tau > 0.0):
            raise ModelValidationError("tau must be positive")
        if not math.isfinite(self.r):
            raise ModelValidationError("interest rate must be finite")
        if np.any(self.sigma <= 0.0) or np.any(self.eta <= 0.0):
            raise ModelValidationError("sigma and eta must be positive")
        if np.any(self.g <= 0.0):
            raise ModelValidationError("observation noise levels g must be positive")
        if np.any(np.abs(self.rho) >= 1.0):
            raise ModelValidationError("correlations rho must lie strictly inside (-1, 1)")
        if np.any(self.Q < 0.0) or np.any(np.abs(self.Q.sum(axis=1) - 1.0) > 1e-8):
            raise ModelValidationError("Q must have nonnegative rows summing to 1")
        if np.any(self.pi < 0.0) or abs(self.pi.sum() - 1.0) > 1e-8:
            raise ModelValidationError("pi must be a probability vector")

    @property
    def n_regimes(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_contracts(self) -> int:
        return self.g.shape[0]

    def to_json(self) -> str:
        payload = {
            "kappa": self.kappa,
            "alpha": self.alpha.tolist(),
            "sigma": self.sigma.tolist(),
            "eta": self.eta.tolist(),
            "rho": self.rho.tolist(),
            "g": self.g.tolist(),
            "Q": self.Q.tolist(),
            "pi": self.pi.tolist(),
            "mu1": self.mu1.tolist(),
            "Sigma1": self.Sigma1.tolist(),
            "r": self.r,
            "tau": self.tau,
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str | dict) -> "TwoFactorParams":
        payload = json.loads(text) if isinstance(text, str) else dict(text)
        required = {"kappa", "alpha", "sigma", "eta", "rho", "g", "Q", "pi", "mu1", "Sigma1"}
        missing = required - payload.keys()
        if missing:
            raise ModelValidationError(f"two-factor params JSON is missing keys: {sorted(missing)}")
        return cls(**payload)


def default_start_params(
    mu1: np.ndarray | None = None, Sigma1: np.ndarray | None = None
) -> TwoFactorParams:
    """Standard calibration starting point for the four-contract model."""
    return TwoFactorParams(
        kappa=5.0,
        alpha=[0.1, -0.05],
        sigma=[0.4, 0.4],
        eta=[0.5, 0.5],
        rho=[0.75, 0.65],
        g=[0.1, 0.1, 0.1, 0.1],
        Q=[[0.98, 0.02], [0.03, 0.97]],
        pi=[0.5, 0.5],
        mu1=np.zeros(2) if mu1 is None else np.asarray(mu1, dtype=float),
        Sigma1=0.05 * np.eye(2) if Sigma1 is None else np.asarray(Sigma1, dtype=float),
    )


def discretize_sde(
    params: TwoFactorParams, regime: int, h: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact one-step discretization ``(d_h, T_h, Hbar_h)`` over a step ``h``.

    ``Z_{t+h} = d_h + T_h Z_t + noise`` with ``noise ~ N(0, Hbar_h)``; every
    entry is the closed-form integral of the continuous model at the given
    regime's parameters.
    """
    if not (h > 0.0):
        raise ModelValidationError("discretization step h must be positive")
    kappa = params.kappa
    alpha = float(params.alpha[regime])
    sigma = float(params.sigma[regime])
    eta = float(params.eta[regime])
    rho = float(params.rho[regime])
    r = params.r

    decay = math.exp(-kappa * h)
    decay2 = math.exp(-2.0 * kappa * h)
    ramp = (1.0 - decay) / kappa
    ramp2 = (1.0 - decay2) / (2.0 * kappa)

    d = np.array([(r - alpha - 0.5 * sigma**2) * h + alpha * ramp, alpha * (1.0 - decay)])
    T = np.array([[1.0, -ramp], [0.0, decay]])
    var_spot = (
        sigma**2 * h
        + eta**2 * (h + ramp2 - 2.0 * ramp) / kappa**2
        - 2.0 * rho * eta * sigma * (h - ramp) / kappa
    )
    cov = (rho * eta * sigma - eta**2 / kappa) * ramp + eta**2 * ramp2 / kappa
    var_yield = eta**2 * ramp2
    Hbar = np.array([[var_spot, cov], [cov, var_yield]])
    try:
        np.linalg.cholesky(Hbar)
    except np.linalg.LinAlgError as exc:
        raise ModelValidationError(
            f"discretized noise covariance is not positive definite at regime {regime}, h={h}"
        ) from exc
    return d, T, Hbar


@dataclass(frozen=True)
class TermStructure:
    """Affine log-futures coefficients per maturity step.

    ``log F(m weeks) = A[m][regime] + Bvec[m] @ z`` for state
    ``z = (ln spot, yield)``; index 0 is the spot itself.
    """

    A: np.ndarray
    Bvec: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float))
        object.__setattr__(self, "Bvec", np.asarray(self.Bvec, dtype=float))
        if self.A.ndim != 2 or self.Bvec.shape != (self.A.shape[0], 2):
            raise ModelValidationError("term structure arrays have inconsistent shapes")
        if np.any(self.A[0] != 0.0) or self.Bvec[0, 0] != 1.0 or self.Bvec[0, 1] != 0.0:
            raise ModelValidationError("term structure must start from A=0, B=(1, 0)")

    @property
    def max_maturity(self) -> int:
        return self.A.shape[0] - 1

    def log_price(self, maturity: int, regime: int, z: np.ndarray) -> float:
        """Log futures price at a maturity (in weeks) given regime and state."""
        return float(self.A[maturity, regime] + self.Bvec[maturity] @ np.asarray(z, dtype=float))


def term_structure(
    params: TwoFactorParams, max_m: int, Q: np.ndarray | None = None
) -> TermStructure:
    """Loadings for maturities ``0..max_m`` weeks via the pricing recursion.

    ``B_m = B_{m-1} T`` and ``A_m(j) = log sum_k Q(j,k) exp(A_{m-1}(k))
    + B_{m-1} d_j + B_{m-1} Hbar_j B_{m-1}' / 2``, with the one-week (h=tau)
    discretization supplying ``T``, ``d_j`` and ``Hbar_j``.
    """
    if max_m < 1:
        raise ModelValidationError("maximum maturity must be at least 1 week")
    Q = params.Q if Q is None else np.asarray(Q, dtype=float)
    J = params.n_regimes
    if Q.shape != (J, J):
        raise ModelValidationError(f"Q must have shape ({J}, {J})")
    steps = [discretize_sde(params, j, params.tau) for j in range(J)]
    ds = np.stack([step[0] for step in steps])
    T = steps[0][1]
    Hbars = np.stack([step[2] for step in steps])

    with np.errstate(divide="ignore"):
        log_Q = np.log(Q)
    A = np.zeros((max_m + 1, J))
    B = np.zeros((max_m + 1, 2))
    B[0] = (1.0, 0.0)
    for m in range(1, max_m + 1):
        prev = B[m - 1]
        A[m] = (
            logsumexp(log_Q + A[m - 1][None, :], axis=1)
            + ds @ prev
            + 0.5 * np.einsum("a,jab,b->j", prev, Hbars, prev)
        )
        B[m] = prev @ T
    return TermStructure(A=A, Bvec=B)


def build_clgm(params: TwoFactorParams, maturities: list[int] | tuple[int, ...]) -> RegimeModel:
    """Assemble the regime-switching state-space model for a contract panel.

    State: ``(ln spot, yield)`` with the exact one-step discretization per
    regime; observations: log futures prices at the given maturities with
    affine loadings from the term structure and diagonal noise ``diag(g)``
    shared across regimes.
    """
    maturities = [int(m) for m in maturities]
    if not maturities:
        raise ModelValidationError("at least one futures maturity is required")
    if min(maturities) < 1:
        raise ModelValidationError("futures maturities must be at least 1 week")
    if len(maturities) != params.n_contracts:
        raise ModelValidationError(
            f"{len(maturities)} maturities given but g has {params.n_contracts} entries"
        )
    J = params.n_regimes
    steps = [discretize_sde(params, j, params.tau) for j in range(J)]
    structure = term_structure(params, max(maturities))
    c = np.stack([structure.A[maturities, j] for j in range(J)])
    B = np.broadcast_to(structure.Bvec[maturities], (J, len(maturities), 2)).copy()
    G = np.broadcast_to(np.diag(params.g), (J, len(maturities), len(maturities))).copy()
    return RegimeModel(
        pi=params.pi,
        Q=params.Q,
        d=np.stack([step[0] for step in steps]),
        T=np.stack([step[1] for step in steps]),
        H=np.stack([np.linalg.cholesky(step[2]) for step in steps]),
        c=c,
        B=B,
        G=G,
        mu1=params.mu1,
        Sigma1=params.Sigma1,
    )


@dataclass(frozen=True)
class FuturesPanel:
    """Panel of log futures prices: one row per date, one column per contract."""

    dates: tuple[str, ...]
    maturities: tuple[int, ...]
    log_prices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dates", tuple(str(d) for d in self.dates))
        object.__setattr__(self, "maturities", tuple(int(m) for m in self.maturities))
        object.__setattr__(self, "log_prices", np.asarray(self.log_prices, dtype=float))
        n, p = len(self.dates), len(self.maturities)
        if self.log_prices.shape != (n, p):
            raise ModelValidationError(
                f"log price matrix must have shape ({n}, {p}), got {self.log_prices.shape}"
            )
        if n == 0 or p == 0:
            raise ModelValidationError("futures panel must contain at least one date and contract")
        if not np.all(np.isfinite(self.log_prices)):
            raise ModelValidationError("futures panel contains non-finite log prices")
        for prev, cur in zip(self.dates, self.dates[1:]):
            if cur <= prev:
                raise ModelValidationError(f"panel dates must be strictly increasing ({prev!r} -> {cur!r})")

    @property
    def n_times(self) -> int:
        return len(self.dates)

    @property
    def n_contracts(self) -> int:
        return len(self.maturities)


def ingest_futures_csv(
    path, maturities: tuple[int, ...] = DEFAULT_MATURITIES
) -> FuturesPanel:
    """Read a ``date,price,price,...`` CSV into a log-price panel.

    The first header column must be ``date``; each remaining column is one
    contract's price series, matched positionally to ``maturities`` (weeks).
    Prices must be strictly positive; dates strictly increasing.
    """
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ModelValidationError(f"{path}: empty futures CSV")
        header = [col.strip() for col in header]
        if not header or header[0].lower() != "date":
            raise ModelValidationError(f"{path}: first CSV column must be 'date', got {header[:1]}")
        n_cols = len(header) - 1
        if n_cols != len(maturities):
            raise ModelValidationError(
                f"{path}: {n_cols} price columns but {len(maturities)} maturities expected"
            )
        dates: list[str] = []
        rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ModelValidationError(
                    f"{path}: row {line_no} has {len(row)} cells, expected {len(header)}"
                )
            dates.append(row[0].strip())
            values = []
            for col, cell in zip(header[1:], row[1:]):
                try:
                    price = float(cell)
                except ValueError:
                    raise ModelValidationError(
                        f"{path}: row {line_no}, column {col!r}: {cell!r} is not a number"
                    )
                if not (price > 0.0) or not math.isfinite(price):
                    raise ModelValidationError(
                        f"{path}: row {line_no}, column {col!r}: price {cell!r} must be positive"
                    )
                values.append(math.log(price))
            rows.append(values)
    if not rows:
        raise ModelValidationError(f"{path}: futures CSV contains no data rows")
    return FuturesPanel(dates=tuple(dates), maturities=tuple(maturities), log_prices=np.array(rows))


def write_futures_csv(path, panel: FuturesPanel) -> None:
    """Write a panel back to the CSV format read by :func:`ingest_futures_csv`."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["date"] + [f"F{m}w" for m in panel.maturities])
        for date, row in zip(panel.dates, panel.log_prices):
            writer.writerow([date] + [f"{math.exp(v):.17g}" for v in row])


def initial_state_from_panel(
    panel: FuturesPanel,
    r: float = DEFAULT_INTEREST_RATE,
    tau: float = DEFAULT_SAMPLING_PERIOD,
    variance: float = 0.05,
) -> tuple[np.ndarray, np.ndarray]:
    """Initial state law ``(mu1, Sigma1)`` from the first panel row.

    The log spot starts at the shortest contract's log price; the yield
    starts at ``r`` minus the slope between the first two contracts over
    their maturity gap (in years).  ``Sigma1`` is isotropic.
    """
    if panel.n_contracts < 2:
        raise ModelValidationError("initial state from panel needs at least two contracts")
    first = panel.log_prices[0]
    gap_years = (panel.maturities[1] - panel.maturities[0]) * tau
    if gap_years <= 0.0:
        raise ModelValidationError("panel maturities must be increasing to imply an initial yield")
    mu1 = np.array([first[0], r - (first[1] - first[0]) / gap_years])
    return mu1, variance * np.eye(2)


def simulate_panel(
    params: TwoFactorParams,
    maturities: tuple[int, ...],
    n: int,
    rng: np.random.Generator,
    start_date_index: int = 0,
) -> tuple[FuturesPanel, np.ndarray, np.ndarray]:
    """Simulate a synthetic futures panel from the assembled model.

    Returns ``(panel, regimes, states)``; dates are synthetic ISO-like
    week stamps so the panel round-trips through the CSV format.
    """
    from .model import simulate  # local import to keep module load light

    model = build_clgm(params, list(maturities))
    regimes, states, ys = simulate(model, n, rng)
    dates = tuple(f"w{start_date_index + i:06d}" for i in range(n))
    panel = FuturesPanel(dates=dates, maturities=tuple(maturities), log_prices=ys)
    return panel, regimes, states


def params_with_initial_state(
    params: TwoFactorParams, mu1: np.ndarray, Sigma1: np.ndarray
) -> TwoFactorParams:
    """Copy of ``params`` with the initial state law replaced."""
    return replace(params, mu1=np.asarray(mu1, dtype=float), Sigma1=np.asarray(Sigma1, dtype=float))
