"""Command-line interface for the regime-switching smoothing toolkit.

Subcommands::

    rbsmc simulate  --config model.json --n 50 --seed 0 --out DIR
    rbsmc filter    --config model.json --data observations.csv --particles 100 --out DIR
    rbsmc smooth    --method two-filter-rejuv --config model.json --data observations.csv --out DIR
    rbsmc benchmark --config benchmark.json --out DIR
    rbsmc calibrate --config em.json --data panel.csv --out DIR

Every command prints a JSON summary on stdout and writes CSV/JSON artifacts
into ``--out``.  Exit codes: 0 on success, 1 on validation/usage errors
(including instances too large for exact enumeration), 2 on numerical
failures.  Errors are reported as one JSON object on stderr of the form
``{"error": {"code": ..., "message": ...}}``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .commodity import ingest_futures_csv
from .em import EmConfig, em_run, theta_labels
from .harness import (
    SMOOTHER_METHODS,
    BenchmarkConfig,
    format_float,
    load_model_config,
    override_config,
    read_observations_csv,
    run_benchmark,
    run_filter,
    run_smoother,
    write_benchmark_csvs,
    write_observations_csv,
    write_simulation_csv,
)
from .model import ModelValidationError, NumericalError, simulate
from .oracle import InstanceTooLargeError
from .sampling import make_rng

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


class CliUsageError(ModelValidationError):
    """Bad command line (unknown flag, missing argument, wrong choice)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); map to our own handling
        raise CliUsageError(message)


def _read_json(path) -> dict:
    with open(path) as handle:
        return json.load(handle)


def _ensure_out_dir(path) -> None:
    os.makedirs(path, exist_ok=True)


def _print_summary(payload: dict) -> None:
    print(json.dumps(payload, indent=2))


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")


def _load_observations(args, model) -> np.ndarray:
    ys = read_observations_csv(args.data)
    if ys.shape[1] != model.obs_dim:
        raise ModelValidationError(
            f"{args.data}: observation dimension {ys.shape[1]} does not match the model's {model.obs_dim}"
        )
    return ys


def _marginals_csv(path, marginals) -> None:
    """Per-time smoothing table: regime probabilities plus state moments."""
    import csv

    probs = marginals.regime_probs
    n, J = probs.shape
    header = ["time_index"] + [f"regime_prob_{j}" for j in range(J)]
    blocks = [probs]
    if marginals.state_means is not None:
        m = marginals.state_means.shape[1]
        header += [f"state_mean_{k}" for k in range(m)]
        blocks.append(marginals.state_means)
        if marginals.state_covs is not None:
            header += [f"state_var_{k}" for k in range(m)]
            blocks.append(np.diagonal(marginals.state_covs, axis1=1, axis2=2))
    table = np.hstack(blocks)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for i in range(n):
            writer.writerow([i] + [format_float(v) for v in table[i]])


# ---------------------------------------------------------------------------
# Subcommand implementations.
# ---------------------------------------------------------------------------


def _cmd_simulate(args) -> int:
    model = load_model_config(_read_json(args.config))
    if args.n < 1:
        raise ModelValidationError("--n must be a positive number of time steps")
    regimes, states, ys = simulate(model, args.n, make_rng(args.seed))
    _ensure_out_dir(args.out)
    sim_path = os.path.join(args.out, "simulation.csv")
    obs_path = os.path.join(args.out, "observations.csv")
    write_simulation_csv(sim_path, regimes, states, ys)
    write_observations_csv(obs_path, ys)
    _print_summary(
        {
            "command": "simulate",
            "n_times": int(args.n),
            "seed": args.seed,
            "regime_counts": [int(c) for c in np.bincount(regimes, minlength=model.n_regimes)],
            "files": [sim_path, obs_path],
        }
    )
    return EXIT_OK


def _cmd_filter(args) -> int:
    model = load_model_config(_read_json(args.config))
    ys = _load_observations(args, model)
    probs, means, log_evidence = run_filter(
        model, ys, args.particles, scheme=args.scheme, rng=make_rng(args.seed)
    )
    _ensure_out_dir(args.out)
    table_path = os.path.join(args.out, "filter.csv")
    import csv

    J, m = probs.shape[1], means.shape[1]
    with open(table_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["time_index"]
            + [f"regime_prob_{j}" for j in range(J)]
            + [f"state_mean_{k}" for k in range(m)]
        )
        for i in range(probs.shape[0]):
            writer.writerow(
                [i] + [format_float(v) for v in probs[i]] + [format_float(v) for v in means[i]]
            )
    summary = {
        "command": "filter",
        "n_times": int(ys.shape[0]),
        "n_particles": int(args.particles),
        "scheme": args.scheme,
        "seed": args.seed,
        "log_evidence": float(log_evidence),
        "files": [table_path],
    }
    _write_json(os.path.join(args.out, "summary.json"), summary)
    _print_summary(summary)
    return EXIT_OK


def _cmd_smooth(args) -> int:
    model = load_model_config(_read_json(args.config))
    ys = _load_observations(args, model)
    output = run_smoother(
        model,
        ys,
        args.method,
        rng=make_rng(args.seed),
        n_particles=args.particles,
        n_trajectories=args.trajectories,
        n_backward=args.backward,
        scheme=args.scheme,
        with_state_moments=True,
    )
    _ensure_out_dir(args.out)
    table_path = os.path.join(args.out, "smooth.csv")
    _marginals_csv(table_path, output.marginals)
    summary = {
        "command": "smooth",
        "method": args.method,
        "n_times": int(ys.shape[0]),
        "n_particles": int(args.particles),
        "scheme": args.scheme,
        "seed": args.seed,
        "log_evidence": float(output.log_evidence),
        "files": [table_path],
    }
    _write_json(os.path.join(args.out, "summary.json"), summary)
    _print_summary(summary)
    return EXIT_OK


def _cmd_benchmark(args) -> int:
    config = BenchmarkConfig.from_json(_read_json(args.config))
    config = override_config(config, seed=args.seed, n_runs=args.runs)
    result = run_benchmark(config)
    _ensure_out_dir(args.out)
    paths = write_benchmark_csvs(result, args.out)
    summary = {
        "command": "benchmark",
        "methods": list(config.methods),
        "n_times": int(config.n_times),
        "n_runs": int(config.n_runs),
        "reference": config.reference,
        "regime_index": int(config.regime_index),
        "seed": int(config.seed),
        "time_averaged_error": result.time_averaged_error(),
        "time_averaged_variance": result.time_averaged_variance(),
        "files": paths,
    }
    _write_json(os.path.join(args.out, "summary.json"), summary)
    _print_summary(summary)
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    config = EmConfig.from_json(_read_json(args.config))
    config = override_config(
        config, seed=args.seed, n_iterations=args.iterations, n_particles=args.particles
    )
    panel = ingest_futures_csv(args.data, maturities=config.maturities)
    result = em_run(config, panel)
    _ensure_out_dir(args.out)

    import csv

    labels = theta_labels(config.params.n_regimes, config.params.n_contracts)
    trace_path = os.path.join(args.out, "em_trace.csv")
    with open(trace_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iteration", "q_before", "q_after", "log_evidence"] + labels)
        for p in range(config.n_iterations):
            writer.writerow(
                [p + 1]
                + [format_float(v) for v in (result.q_before[p], result.q_after[p], result.log_evidences[p])]
                + [format_float(v) for v in result.theta_trace[p + 1]]
            )

    params_path = os.path.join(args.out, "final_params.json")
    _write_json(
        params_path,
        {
            "params": json.loads(result.final_params.to_json()),
            "maturities": list(config.maturities),
            "log_evidence": float(result.log_evidences[-1]),
        },
    )

    posterior_path = os.path.join(args.out, "regime_posteriors.csv")
    with open(posterior_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        J = result.regime_posteriors.shape[1]
        writer.writerow(["time_index"] + [f"regime_prob_{j}" for j in range(J)])
        for i, row in enumerate(result.regime_posteriors):
            writer.writerow([i] + [format_float(v) for v in row])

    summary = {
        "command": "calibrate",
        "n_iterations": int(config.n_iterations),
        "n_particles": int(config.n_particles),
        "seed": int(config.seed),
        "ascent_fraction": float(result.ascent_fraction),
        "log_evidence_first": float(result.log_evidences[0]),
        "log_evidence_final": float(result.log_evidences[-1]),
        "files": [trace_path, params_path, posterior_path],
    }
    _write_json(os.path.join(args.out, "summary.json"), summary)
    _print_summary(summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and entry point.
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rbsmc", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, particles=None):
        p.add_argument("--config", required=True, help="path to a JSON config file")
        if data:
            p.add_argument("--data", required=True, help="path to an input CSV file")
        if particles == "flag":
            p.add_argument("--particles", type=int, default=100, help="particle count (default 100)")
        elif particles == "override":
            p.add_argument(
                "--particles", type=int, default=None, help="override the configured particle count"
            )
        p.add_argument("--seed", type=int, default=None, help="seed override (default: config seed or 0)")
        p.add_argument("--out", required=True, help="output directory (created if missing)")

    p = sub.add_parser("simulate", help="simulate a dataset from a model config")
    p.add_argument("--n", type=int, required=True, help="number of time steps")
    common(p)
    p.set_defaults(func=_cmd_simulate, seed_default=0)

    p = sub.add_parser("filter", help="run the forward particle filter")
    common(p, data=True, particles="flag")
    p.add_argument("--scheme", default="KL-OS", choices=("KL-OS", "CS-OS", "multinomial"))
    p.set_defaults(func=_cmd_filter, seed_default=0)

    p = sub.add_parser("smooth", help="run one smoothing method")
    p.add_argument("--method", required=True, choices=SMOOTHER_METHODS)
    common(p, data=True, particles="flag")
    p.add_argument("--trajectories", type=int, default=None, help="backward draws (default: --particles)")
    p.add_argument("--backward", type=int, default=None, help="backward filter size (default: --particles)")
    p.add_argument("--scheme", default="KL-OS", choices=("KL-OS", "CS-OS", "multinomial"))
    p.set_defaults(func=_cmd_smooth, seed_default=0)

    p = sub.add_parser("benchmark", help="repeated-run smoothing benchmark from a config")
    common(p)
    p.add_argument("--runs", type=int, default=None, help="override the configured run count")
    p.set_defaults(func=_cmd_benchmark, seed_default=None)

    p = sub.add_parser("calibrate", help="EM calibration of the two-factor model on a futures panel")
    p.add_argument("--iterations", type=int, default=None, help="override the configured iteration count")
    common(p, data=True, particles="override")
    p.set_defaults(func=_cmd_calibrate, seed_default=None)

    return parser


def _emit_error(code: str, exc: BaseException, exit_code: int, **extra) -> int:
    payload = {"error": {"code": code, "message": str(exc), **extra}}
    print(json.dumps(payload), file=sys.stderr)
    return exit_code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        # Commands with a Monte Carlo seed default to 0 when the config has
        # no seed of its own (simulate/filter/smooth); config-driven commands
        # keep the config seed unless --seed is given.
        if args.seed is None and getattr(args, "seed_default", None) is not None:
            args.seed = args.seed_default
        return args.func(args)
    except CliUsageError as exc:
        return _emit_error("usage", exc, EXIT_VALIDATION)
    except InstanceTooLargeError as exc:
        return _emit_error("instance-too-large", exc, EXIT_VALIDATION)
    except NumericalError as exc:
        extra = {} if exc.time_index is None else {"time_index": exc.time_index}
        return _emit_error("numerical", exc, EXIT_NUMERICAL, **extra)
    except ModelValidationError as exc:
        return _emit_error("validation", exc, EXIT_VALIDATION)
    except FileNotFoundError as exc:
        return _emit_error("missing-file", exc, EXIT_VALIDATION)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        return _emit_error("validation", exc, EXIT_VALIDATION)


if __name__ == "__main__":
    raise SystemExit(main())
