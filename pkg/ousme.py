#!/usr/bin/env python3
"""
ousme.py
--------
Command-line harness for second-moment estimation of fractional
Ornstein-Uhlenbeck processes: covariance export, path simulation, exact
cumulants, CLT and drift experiments, coupling checks and rate fits.

Usage:
    python ousme.py cov       --model fou1 --theta 1 --hurst 0.6 --n 64 --out results/cov.csv
    python ousme.py simulate  --model fou1 --theta 1 --hurst 0.6 --n 64 --reps 100 --out results/paths.bin
    python ousme.py cumulants --model fou1 --theta 1 --hurst 0.6 --n 64,256,1024 --out results/cumulants.json
    python ousme.py clt       --model fou1 --theta 1 --hurst 0.6 --n 256,1024,4096 --reps 10000 --out results/clt.csv
    python ousme.py drift     --model fou2 --mu 1 --hurst 0.75 --alpha 0.4 --n 16384 --reps 2000
    python ousme.py couple    --model fou1 --theta 1 --hurst 0.6 --n 64,256,1024,4096 --reps 10000
    python ousme.py rates     --input results/clt.csv --model fou1 --theta 1 --hurst 0.6 --alpha 0.5

Exit codes: 0 success, 1 report failure, 2 configuration error, 3 numerical failure.
"""

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

import coloredlogs
import dotenv
from pydantic import ValidationError

from covariance import stationary_covariance, write_covariance_csv
from cumulants import exact_cumulants
from harness import (
    ExperimentConfig,
    Statistic,
    coupling_check,
    emit_report,
    fit_rate,
    limit_variance,
    path_kind,
    read_distance_csv,
    run_clt_experiment,
    run_drift_experiment,
    variance_delta,
    write_records,
)
from sampler import build_cov_sequence, circulant_sample, write_path_batch, write_path_csv, z_to_x
from utils import DomainError, NumericalError, OusmeError, ReportError, ScaleCapError, get_settings

logger = logging.getLogger("ousme")

EXIT_OK = 0
EXIT_REPORT = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

MODEL_FLAGS = {"model": "variant", "theta": "theta", "mu": "mu", "hurst": "hurst"}
CONFIG_FLAGS = ("c0", "alpha", "n_list", "reps", "seed", "statistic", "threads", "block_size", "drift_true", "out")


def parse_n_list(text: str) -> List[int]:
    """Parse a comma-separated list of sample sizes, e.g. "256,1024"."""
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid n list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser with one subcommand per task."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file mirroring ExperimentConfig; flags override it")
    common.add_argument("--model", choices=["fou1", "fou2"], help="Process model")
    common.add_argument("--hurst", type=float, help="Hurst index H")
    common.add_argument("--theta", type=float, help="fOU1 drift rate theta")
    common.add_argument("--mu", type=float, help="fOU2 drift rate mu")
    common.add_argument("--alpha", type=float, help="Schedule exponent: delta_n = c0 * n^-alpha")
    common.add_argument("--c0", type=float, help="Schedule constant c0")
    common.add_argument("--n", dest="n_list", type=parse_n_list, help="Comma-separated sample sizes")
    common.add_argument("--reps", type=int, help="Monte Carlo replications per n")
    common.add_argument("--seed", type=int, help="Root seed")
    common.add_argument("--threads", type=int, help="Worker threads (default: OUSME_THREADS)")
    common.add_argument("--block-size", dest="block_size", type=int, help="Replications per work block")
    common.add_argument("--out", help="Output path")
    common.add_argument("--format", dest="fmt", choices=["csv", "json"], default="csv", help="Output format")

    parser = argparse.ArgumentParser(
        description="Simulate fOU processes and check Berry-Esseen rates of the second-moment estimator"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    subparsers.add_parser("cov", parents=[common], help="Export the covariance sequence for the first n")

    simulate = subparsers.add_parser("simulate", parents=[common], help="Simulate a batch of paths")
    simulate.add_argument("--kind", choices=["Z", "X"], default="Z", help="Stationary paths or the mapped X/S paths")
    simulate.add_argument("--binary", action="store_true", help="Write the OUSME1 binary layout instead of CSV")

    subparsers.add_parser("cumulants", parents=[common], help="Exact cumulants of V_n(Z) per n")

    clt = subparsers.add_parser("clt", parents=[common], help="Distances of V_n/sigma to N(0, 1)")
    clt.add_argument("--statistic", choices=["Vn_Z", "Vn_X"], help="Statistic to standardize")
    clt.add_argument("--plot", action="store_true", help="Also emit a matplotlib plot script")

    drift = subparsers.add_parser("drift", parents=[common], help="Standardized drift estimator CLT")
    drift.add_argument("--drift-true", dest="drift_true", type=float, help="Drift value to center at")
    drift.add_argument("--plot", action="store_true", help="Also emit a matplotlib plot script")

    subparsers.add_parser("couple", parents=[common], help="Coupling error Tn * E|V_n(X) - V_n(Z)|^2")

    rates = subparsers.add_parser("rates", parents=[common], help="Fit log-log slopes to a distance CSV")
    rates.add_argument("--input", required=True, help="CSV written by clt or drift")

    return parser


def load_config(args: argparse.Namespace, defaults: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Merge the JSON config file, then explicit flags, into an ExperimentConfig."""
    data: Dict[str, Any] = dict(defaults or {})
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as handle:
                data.update(json.load(handle))
        except (OSError, json.JSONDecodeError) as exc:
            raise DomainError(f"cannot read config file {args.config}: {exc}") from exc

    model = dict(data.get("model") or {})
    for flag, field_name in MODEL_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            model[field_name] = value
    data["model"] = model

    for flag in CONFIG_FLAGS:
        value = getattr(args, flag, None)
        if value is not None:
            data[flag] = value

    return ExperimentConfig.model_validate(data)


def _default_out(config: ExperimentConfig, name: str, fmt: str) -> str:
    return config.out or f"results/{name}.{fmt}"


def cmd_cov(args: argparse.Namespace) -> int:
    config = load_config(args, {"reps": 1})
    grid = config.grid_for(config.n_list[0])
    seq = build_cov_sequence(stationary_covariance(config.model), grid)
    out = _default_out(config, "covariance", "csv")
    write_covariance_csv(seq.values, grid.delta, out)
    print(f"Wrote {grid.n} covariance lags to {out}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    config = load_config(args)
    grid = config.grid_for(config.n_list[0])
    seq = build_cov_sequence(stationary_covariance(config.model), grid)
    batch = circulant_sample(seq, config.reps, config.seed, threads=config.threads, block_size=config.block_size)
    if args.kind == "X":
        batch = z_to_x(batch, config.model.rate, path_kind(config.model))
    if args.binary:
        out = write_path_batch(batch, _default_out(config, "paths", "bin"))
    else:
        out = write_path_csv(batch, _default_out(config, "paths", "csv"))
    print(f"Wrote {batch.reps} paths of length {grid.n} to {out} (clipped mass {batch.embedding.clipped_mass:.2e})")
    return EXIT_OK


def cmd_cumulants(args: argparse.Namespace) -> int:
    config = load_config(args, {"reps": 1})
    cov = stationary_covariance(config.model)
    records = []
    for n in config.n_list:
        grid = config.grid_for(n)
        sigma2 = limit_variance(config.model, variance_delta(config.model, grid.delta))
        report = exact_cumulants(build_cov_sequence(cov, grid), sigma2=sigma2)
        records.append(report.to_json_dict())
        logger.info("n=%d kappa2=%.6g kappa3=%.6g kappa4=%.6g", n, report.kappa2, report.kappa3, report.kappa4)
    out = write_records(records, args.fmt, _default_out(config, "cumulants", args.fmt), "cumulants", config)
    print(f"Wrote cumulants for {len(records)} sizes to {out}")
    return EXIT_OK


def _emit_distances(table, config: ExperimentConfig, args: argparse.Namespace, name: str) -> int:
    fits = []
    for column in ("d_kol", "d_w"):
        try:
            fits.append(fit_rate(table, column))
        except DomainError as exc:
            logger.warning("No %s rate fit: %s", column, exc)
    written = emit_report(table, fits, args.fmt, _default_out(config, name, args.fmt), plot=args.plot)
    for failure in table.failures:
        print(f"n={failure.n} failed: {failure.reason}")
    print(f"Wrote {', '.join(written)}")
    return EXIT_OK


def cmd_clt(args: argparse.Namespace) -> int:
    config = load_config(args)
    return _emit_distances(run_clt_experiment(config), config, args, "clt")


def cmd_drift(args: argparse.Namespace) -> int:
    config = load_config(args, {"statistic": Statistic.DRIFT.value})
    return _emit_distances(run_drift_experiment(config), config, args, "drift")


def cmd_couple(args: argparse.Namespace) -> int:
    config = load_config(args)
    table = coupling_check(config)
    records = [row.model_dump() for row in table.rows]
    out = write_records(records, args.fmt, _default_out(config, "coupling", args.fmt), "coupling", config)
    print(f"Wrote coupling table to {out}")
    return EXIT_OK


def cmd_rates(args: argparse.Namespace) -> int:
    table = read_distance_csv(args.input)
    config = load_config(args, {"reps": 1, "n_list": [row.n for row in table.rows] or [1]})
    fits = [fit_rate(table, column, alpha=config.alpha, params=config.model) for column in ("d_kol", "d_w")]
    records = [fit.model_dump() for fit in fits]
    out = write_records(records, args.fmt, _default_out(config, "rates", args.fmt), "rates", config)
    for fit in fits:
        print(f"{fit.column}: slope {fit.slope:.3f} (theory {fit.theoretical_slope}), r^2 {fit.r_squared:.3f}")
    print(f"Wrote {out}")
    return EXIT_OK


COMMANDS = {
    "cov": cmd_cov,
    "simulate": cmd_simulate,
    "cumulants": cmd_cumulants,
    "clt": cmd_clt,
    "drift": cmd_drift,
    "couple": cmd_couple,
    "rates": cmd_rates,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run the subcommand and map errors to exit codes."""
    dotenv.load_dotenv()
    get_settings.cache_clear()
    coloredlogs.install(level=get_settings().log_level, fmt="%(asctime)s %(name)s %(levelname)s %(message)s")

    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, DomainError, ScaleCapError) as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"Numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ReportError as exc:
        print(f"Report error: {exc}", file=sys.stderr)
        return EXIT_REPORT
    except OusmeError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_REPORT


if __name__ == "__main__":
    sys.exit(main())
