"""Experiment harness: smoother dispatch, the repeated-run benchmark, CSV I/O.

The benchmark study simulates one dataset from a configured model, runs each
requested smoother many times with independent seeds, and reports per-time
mean absolute error against a reference posterior together with the empirical
variance of the estimates.  All CSV output uses 17-significant-digit floats so
files are byte-identical across runs with the same seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .commodity import DEFAULT_MATURITIES, TwoFactorParams, build_clgm
from .ffbs import SmoothingMarginals, smooth_ffbs
from .forward import filter_regime_marginals, forward_pass
from .model import ModelValidationError, RegimeModel, simulate
from .oracle import enumerate_posterior
from .twofilter import smooth_two_filter

SMOOTHER_METHODS = ("ffbs", "ffbs-rejuv", "two-filter", "two-filter-rejuv", "oracle")
BENCHMARK_REFERENCES = ("oracle", "ffbs-rejuv")


def format_float(value: float) -> str:
    """Render a float with 17 significant digits (round-trips exactly)."""
    return f"{float(value):.17g}"


# ---------------------------------------------------------------------------
# CSV helpers for observation sequences and simulated datasets.
# ---------------------------------------------------------------------------


def write_observations_csv(path, ys: np.ndarray) -> None:
    """Write an observation sequence as ``time_index,y0,...``."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["time_index"] + [f"y{k}" for k in range(ys.shape[1])])
        for i, row in enumerate(ys):
            writer.writerow([i] + [format_float(v) for v in row])


def read_observations_csv(path) -> np.ndarray:
    """Read a ``time_index,y0,...`` CSV back into an ``(n, p)`` array."""
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows or not rows[0] or rows[0][0] != "time_index":
        raise ModelValidationError(f"{path}: expected header starting with 'time_index'")
    y_cols = [k for k, name in enumerate(rows[0]) if name.startswith("y")]
    if not y_cols:
        raise ModelValidationError(f"{path}: no observation columns (named y0, y1, ...)")
    data = []
    for number, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            data.append([float(row[k]) for k in y_cols])
        except (ValueError, IndexError) as exc:
            raise ModelValidationError(f"{path}: bad row {number}: {exc}") from exc
    if not data:
        raise ModelValidationError(f"{path}: no data rows")
    return np.asarray(data, dtype=float)


def write_simulation_csv(path, regimes: np.ndarray, states: np.ndarray, ys: np.ndarray) -> None:
    """Write a simulated dataset as ``time_index,regime,z0,...,y0,...``."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        header = (
            ["time_index", "regime"]
            + [f"z{k}" for k in range(states.shape[1])]
            + [f"y{k}" for k in range(ys.shape[1])]
        )
        writer.writerow(header)
        for i in range(ys.shape[0]):
            writer.writerow(
                [i, int(regimes[i])]
                + [format_float(v) for v in states[i]]
                + [format_float(v) for v in ys[i]]
            )


def _write_table_csv(path, header: list[str], int_col: np.ndarray, values: np.ndarray) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for i, row in zip(int_col, np.atleast_2d(values)):
            writer.writerow([int(i)] + [format_float(v) for v in row])


# ---------------------------------------------------------------------------
# Model configuration loading (plain CLGM payload or two-factor commodity).
# ---------------------------------------------------------------------------


def load_model_config(payload: dict | str) -> RegimeModel:
    """Build a model from a config payload.

    Two forms are accepted: a direct model payload (keys ``pi,Q,d,T,H,c,B,G,
    mu1,Sigma1``) or ``{"commodity": {"params": {...}, "maturities": [...]}}``
    which builds the two-factor futures model at those maturities.
    """
    payload = json.loads(payload) if isinstance(payload, str) else payload
    if not isinstance(payload, dict):
        raise ModelValidationError("model config must be a JSON object")
    if "commodity" in payload:
        section = payload["commodity"]
        if not isinstance(section, dict) or "params" not in section:
            raise ModelValidationError("'commodity' config section needs a 'params' object")
        params = TwoFactorParams.from_json(section["params"])
        maturities = section.get("maturities", list(DEFAULT_MATURITIES))
        return build_clgm(params, maturities)
    return RegimeModel.from_json(payload)


# ---------------------------------------------------------------------------
# Single-run smoother dispatch shared by the CLI and the benchmark loop.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmootherOutput:
    marginals: SmoothingMarginals
    log_evidence: float


def run_smoother(
    model: RegimeModel,
    ys: np.ndarray,
    method: str,
    rng: int | np.random.Generator | None = 0,
    n_particles: int = 100,
    n_trajectories: int | None = None,
    n_backward: int | None = None,
    scheme: str = "KL-OS",
    with_state_moments: bool = False,
    estimator: str = "rao-blackwell",
) -> SmootherOutput:
    """Run one smoothing method and return per-time marginals plus evidence.

    ``n_trajectories`` (backward draws of the trajectory samplers) and
    ``n_backward`` (backward filter size of the two-filter variants) default
    to ``n_particles``.  The trajectory samplers report Rao-Blackwellized
    regime marginals by default (``estimator="frequency"`` switches to plain
    trajectory frequencies); the other methods are unaffected by the flag.
    """
    if method not in SMOOTHER_METHODS:
        raise ModelValidationError(
            f"unknown smoothing method {method!r}; choose from {SMOOTHER_METHODS}"
        )
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if method == "oracle":
        oracle = enumerate_posterior(model, ys, with_state_moments=with_state_moments)
        marginals = SmoothingMarginals(
            regime_probs=oracle.smooth_probs,
            state_means=oracle.state_means,
            state_covs=oracle.state_covs,
        )
        return SmootherOutput(marginals=marginals, log_evidence=oracle.log_evidence)
    if method in ("ffbs", "ffbs-rejuv"):
        result = smooth_ffbs(
            model,
            ys,
            n_particles=n_particles,
            n_trajectories=n_trajectories or n_particles,
            scheme=scheme,
            rng=rng,
            rejuvenate=(method == "ffbs-rejuv"),
            with_state_moments=with_state_moments,
            estimator=estimator,
        )
        return SmootherOutput(marginals=result.marginals, log_evidence=result.log_evidence)
    result = smooth_two_filter(
        model,
        ys,
        n_particles=n_particles,
        n_backward=n_backward,
        scheme=scheme,
        rng=rng,
        rejuvenate=(method == "two-filter-rejuv"),
    )
    return SmootherOutput(marginals=result.marginals, log_evidence=result.log_evidence)


def run_filter(
    model: RegimeModel,
    ys: np.ndarray,
    n_particles: int,
    scheme: str = "KL-OS",
    rng: int | np.random.Generator | None = 0,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Forward filter only: per-time filtered regime probabilities and state means."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    clouds = forward_pass(model, ys, n_particles, scheme=scheme, rng=rng)
    probs = filter_regime_marginals(clouds, model.n_regimes)
    means = np.stack(
        [np.exp(cloud.log_w) @ cloud.mu for cloud in clouds]
    )
    return probs, means, clouds[-1].log_norm_const


# ---------------------------------------------------------------------------
# Repeated-run benchmark.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkConfig:
    """Settings of the repeated-run smoothing benchmark.

    One dataset of length ``n_times`` is simulated from ``model``; every
    method in ``methods`` is then run ``n_runs`` times with independent
    seeds.  Trajectory samplers use ``ffbs_particles`` forward particles and
    ``ffbs_trajectories`` backward draws; the two-filter variants use
    ``twofilter_particles`` in both directions.  ``reference`` picks the
    comparison posterior: exact enumeration, or a large rejuvenated
    trajectory run (``reference_particles``) when enumeration is infeasible.
    Reported errors are ``|estimate - reference|`` of the probability of
    regime ``regime_index``.
    """

    model: RegimeModel
    n_times: int = 10
    n_runs: int = 100
    methods: tuple[str, ...] = ("ffbs", "ffbs-rejuv", "two-filter", "two-filter-rejuv")
    ffbs_particles: int = 25
    ffbs_trajectories: int = 25
    twofilter_particles: int = 100
    scheme: str = "KL-OS"
    reference: str = "oracle"
    reference_particles: int = 4000
    regime_index: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.n_times < 2 or self.n_runs < 1:
            raise ModelValidationError("benchmark needs n_times >= 2 and n_runs >= 1")
        unknown = [m for m in self.methods if m not in SMOOTHER_METHODS]
        if unknown or not self.methods:
            raise ModelValidationError(
                f"benchmark methods must be a non-empty subset of {SMOOTHER_METHODS}, got {self.methods}"
            )
        if self.reference not in BENCHMARK_REFERENCES:
            raise ModelValidationError(f"reference must be one of {BENCHMARK_REFERENCES}")
        if not 0 <= self.regime_index < self.model.n_regimes:
            raise ModelValidationError(
                f"regime_index {self.regime_index} out of range for {self.model.n_regimes} regimes"
            )
        if min(self.ffbs_particles, self.ffbs_trajectories, self.twofilter_particles) < 1:
            raise ModelValidationError("particle counts must be positive")

    def to_json(self) -> str:
        payload = {
            "model": json.loads(self.model.to_json()),
            "n_times": self.n_times,
            "n_runs": self.n_runs,
            "methods": list(self.methods),
            "ffbs_particles": self.ffbs_particles,
            "ffbs_trajectories": self.ffbs_trajectories,
            "twofilter_particles": self.twofilter_particles,
            "scheme": self.scheme,
            "reference": self.reference,
            "reference_particles": self.reference_particles,
            "regime_index": self.regime_index,
            "seed": self.seed,
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str | dict) -> "BenchmarkConfig":
        payload = json.loads(text) if isinstance(text, str) else dict(text)
        if "model" not in payload:
            raise ModelValidationError("benchmark config JSON must contain a 'model' object")
        payload = dict(payload)
        payload["model"] = load_model_config(payload["model"])
        if "methods" in payload:
            payload["methods"] = tuple(payload["methods"])
        return cls(**payload)


@dataclass(frozen=True)
class BenchmarkResult:
    """Per-time error/variance summaries of a repeated-run benchmark.

    ``estimates[r, i, k]`` is run ``r``'s estimate of the tracked regime
    probability at time ``i`` under method ``k``; ``reference_probs[i]`` the
    comparison posterior.  ``mean_error`` averages ``|estimate - reference|``
    over runs; ``variance`` is the empirical (population) variance of the
    estimates over runs.
    """

    config: BenchmarkConfig
    regimes_true: np.ndarray
    observations: np.ndarray
    reference_probs: np.ndarray
    estimates: np.ndarray
    mean_error: np.ndarray = field(init=False)
    variance: np.ndarray = field(init=False)

    def __post_init__(self):
        errors = np.abs(self.estimates - self.reference_probs[None, :, None])
        object.__setattr__(self, "mean_error", errors.mean(axis=0))
        object.__setattr__(self, "variance", self.estimates.var(axis=0))

    def time_averaged_error(self) -> dict[str, float]:
        return {
            method: float(self.mean_error[:, k].mean())
            for k, method in enumerate(self.config.methods)
        }

    def time_averaged_variance(self) -> dict[str, float]:
        return {
            method: float(self.variance[:, k].mean())
            for k, method in enumerate(self.config.methods)
        }


def _benchmark_method_run(config: BenchmarkConfig, ys: np.ndarray, method: str, rng) -> np.ndarray:
    if method in ("ffbs", "ffbs-rejuv"):
        n_particles, n_traj = config.ffbs_particles, config.ffbs_trajectories
    else:
        n_particles, n_traj = config.twofilter_particles, None
    output = run_smoother(
        config.model,
        ys,
        method,
        rng=rng,
        n_particles=n_particles,
        n_trajectories=n_traj,
        scheme=config.scheme,
        with_state_moments=False,
    )
    return output.marginals.regime_probs[:, config.regime_index]


def run_benchmark(config: BenchmarkConfig) -> BenchmarkResult:
    """Simulate one dataset and run every configured method ``n_runs`` times.

    Reproducibility: a seed-sequence tree rooted at ``config.seed`` assigns
    one child to the dataset simulation, one to the reference run (when the
    reference itself is Monte Carlo), and one to every ``(run, method)``
    pair, so every method run draws from its own independent stream.
    """
    root = np.random.SeedSequence(config.seed)
    data_ss, reference_ss, runs_ss = root.spawn(3)
    regimes_true, _, ys = simulate(
        config.model, config.n_times, np.random.Generator(np.random.Philox(data_ss))
    )

    if config.reference == "oracle":
        oracle = enumerate_posterior(config.model, ys, with_state_moments=False)
        reference_probs = oracle.smooth_probs[:, config.regime_index]
    else:
        result = smooth_ffbs(
            config.model,
            ys,
            n_particles=config.reference_particles,
            n_trajectories=config.reference_particles,
            scheme=config.scheme,
            rng=np.random.Generator(np.random.Philox(reference_ss)),
            rejuvenate=True,
            estimator="rao-blackwell",
        )
        reference_probs = result.marginals.regime_probs[:, config.regime_index]

    n_methods = len(config.methods)
    children = runs_ss.spawn(config.n_runs * n_methods)
    estimates = np.empty((config.n_runs, config.n_times, n_methods))
    for r in range(config.n_runs):
        for k, method in enumerate(config.methods):
            rng = np.random.Generator(np.random.Philox(children[r * n_methods + k]))
            estimates[r, :, k] = _benchmark_method_run(config, ys, method, rng)
    return BenchmarkResult(
        config=config,
        regimes_true=regimes_true,
        observations=ys,
        reference_probs=reference_probs,
        estimates=estimates,
    )


def write_benchmark_csvs(result: BenchmarkResult, out_dir) -> list[str]:
    """Write ``error.csv`` and ``variance.csv``; returns the paths written."""
    import os

    header = ["time_index"] + list(result.config.methods)
    times = np.arange(result.config.n_times)
    paths = []
    for name, table in (("error.csv", result.mean_error), ("variance.csv", result.variance)):
        path = os.path.join(out_dir, name)
        _write_table_csv(path, header, times, table)
        paths.append(path)
    return paths


def override_config(config, **overrides):
    """Replace dataclass fields with any overrides that are not ``None``."""
    updates = {key: value for key, value in overrides.items() if value is not None}
    return replace(config, **updates) if updates else config
