"""Command line entry point: ``ebrates <command> --config cfg.yaml --seed S --out DIR``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalError, ParameterError
from .inference import contraction_radius, eb_posterior, hb_posterior, mmle
from .lab import (
    ExperimentConfig,
    compute_rate_curve,
    emit_outputs,
    replicate_seed,
    run_experiment,
    write_manifest,
    write_table,
)
from .marginal import marginal_curve
from .models import DensityTable, simulate
from .priors import default_hyperprior

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _dataset(config: ExperimentConfig):
    n = config.n_list[0]
    theta0 = config.truth_coeffs()
    ss = np.random.SeedSequence(replicate_seed(config.base_seed, n, 0))
    seeds = ss.spawn(6)
    data = simulate(config.model.with_n(n), theta0, int(seeds[0].generate_state(1)[0]))
    return data, theta0, seeds


def _truth(config, theta0):
    return DensityTable(theta0 * theta0.size, "cells") if config.histogram else theta0


def cmd_simulate(config: ExperimentConfig, out: Path):
    """Simulate one dataset and write it with the truth."""
    data, theta0, _ = _dataset(config)
    write_table(out / "data.csv", ["index", "obs"], enumerate(data.obs))
    write_table(out / "truth.csv", ["index", "theta0"], enumerate(theta0))
    write_manifest(out / "manifest.json", config.to_dict(),
                   {"n": data.model.n, "seed": data.seed, "truth_norm": float(np.linalg.norm(theta0))})


def cmd_mmle(config: ExperimentConfig, out: Path):
    """Evaluate the log marginal over the grid and report the MMLE."""
    from .plotting import plot_marginal_curve

    data, _, seeds = _dataset(config)
    n = data.model.n
    curve = marginal_curve(data, config.prior_at(n), config.grid(n), mc_draws=config.mc_draws,
                           seed=seeds[1])
    lam = mmle(curve)
    se = curve.mc_se if curve.mc_se is not None else np.full(len(curve.grid), np.nan)
    write_table(out / "marginal.csv", ["lambda", "log_marginal", "mc_se"],
                zip(curve.grid.values, curve.logm, se))
    write_manifest(out / "manifest.json", config.to_dict(),
                   {"n": n, "lambda_hat": lam, "method": curve.method.value,
                    "max_log_marginal": float(curve.logm.max())})
    plot_marginal_curve(curve, out / "marginal.png", lam)


def cmd_rates(config: ExperimentConfig, out: Path):
    """Solve the rate equation over the grid for every n."""
    from .plotting import plot_rate_curve

    theta0 = config.truth_coeffs()
    rows, summary, curve = [], {}, None
    for n in config.n_list:
        curve = compute_rate_curve(config, n, theta0)
        rows += [(n, lam, e, m, f) for lam, e, m, f in
                 zip(curve.grid.values, curve.eps, curve.in_lambda0, curve.flagged)]
        summary[str(n)] = {"eps0": curve.eps0, "lambda0_size": int(curve.in_lambda0.sum()),
                           "floor_fallback": curve.fallback,
                           "argmin_lambda": float(curve.grid.values[np.argmin(curve.eps)])}
    write_table(out / "rates.csv", ["n", "lambda", "eps_n", "in_lambda0", "flagged"], rows)
    write_manifest(out / "manifest.json", config.to_dict(), summary)
    plot_rate_curve(curve, out / "rate_curve.png")


def cmd_experiment(config: ExperimentConfig, out: Path):
    """Run the Monte Carlo contraction experiment."""
    table = run_experiment(config)
    emit_outputs(table, out, config)
    failed = sum(r.status != "ok" for r in table)
    if failed:
        print(f"warning: {failed} of {len(table)} rows failed; see the status column",
              file=sys.stderr)


def cmd_hb(config: ExperimentConfig, out: Path):
    """Fit the hierarchical posterior and compare its radius with EB."""
    data, theta0, seeds = _dataset(config)
    n = data.model.n
    prior, grid = config.prior_at(n), config.grid(n)
    hyper = config.hyperprior or default_hyperprior(prior.kind)
    curve = marginal_curve(data, prior, grid, mc_draws=config.mc_draws, seed=seeds[1])
    hb = hb_posterior(data, prior, grid, hyper, curve, seed=seeds[4], mcmc=config.mcmc)
    lam = mmle(curve)
    eb = eb_posterior(data, prior, lam, seed=seeds[2], mcmc=config.mcmc)
    truth, metric = _truth(config, theta0), config.radius_metric
    write_table(out / "hb_weights.csv", ["lambda", "log_marginal", "weight"],
                zip(grid.values, curve.logm, hb.weights))
    write_manifest(out / "manifest.json", config.to_dict(), {
        "n": n, "lambda_hat": lam,
        "hyper_posterior_mean": float(hb.weights @ grid.values),
        "radius_hb": contraction_radius(hb, truth, config.level, config.radius_draws, seeds[5], metric),
        "radius_eb": contraction_radius(eb, truth, config.level, config.radius_draws, seeds[3], metric),
    })


COMMANDS = {"simulate": cmd_simulate, "mmle": cmd_mmle, "rates": cmd_rates,
            "experiment": cmd_experiment, "hb": cmd_hb}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebrates", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        p = sub.add_parser(name, help=func.__doc__ or name)
        p.add_argument("--config", required=True, help="YAML configuration file")
        p.add_argument("--seed", type=int, default=None, help="overrides base_seed")
        p.add_argument("--out", default=None, help="output directory (default: config output or .)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ExperimentConfig.from_yaml(args.config, base_seed=args.seed)
        out = Path(args.out or config.output or ".")
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](config, out)
    except (ConfigError, ParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
