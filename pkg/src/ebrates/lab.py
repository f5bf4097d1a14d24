"""Monte Carlo contraction experiments, exponent fits and result files."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import math
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import yaml
from scipy.stats import binomtest, linregress

from . import __version__
from .errors import ConfigError, NumericalError, ParameterError
from .inference import (
    HISTOGRAM,
    contraction_radius,
    distances,
    eb_posterior,
    hb_posterior,
    mmle,
)
from .marginal import marginal_curve
from .models import (
    DENSITY_TRUTH_DIM,
    DensityParam,
    DensityTable,
    ModelKind,
    ModelSpec,
    TruthSpec,
    generate_truth,
    histogram_truth,
    simulate,
)
from .priors import HyperGrid, HyperPrior, PriorKind, PriorSpec, default_grid
from .rates import RateCurve, rate_curve

DENSITY_GAUSSIAN_TRUNC = 16


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RateOptions:
    enabled: bool = True
    K: float = 2.0
    draws: int = 256
    seed: int = 0
    Mn: float | None = None
    mn: float | None = None
    rtol: float = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce an experiment table.

    The YAML form mirrors the fields; see the README for the schema.
    """

    model: ModelSpec
    prior: PriorSpec
    truth: TruthSpec
    n_list: tuple
    replicates: int = 1
    base_seed: int = 0
    grid_points: int = 60
    grid_values: tuple | None = None
    metric: str | None = None
    level: float = 0.95
    hyperprior: HyperPrior | None = None
    rates: RateOptions = field(default_factory=RateOptions)
    radius_draws: int = 1000
    mc_draws: int = 10_000
    mcmc: dict | None = None
    n_jobs: int = 1
    record_timing: bool = False
    delta: float = 0.1
    output: str | None = None

    def __post_init__(self):
        n_list = tuple(int(n) for n in self.n_list)
        if not n_list:
            raise ConfigError("n_list must not be empty")
        if any(b <= a for a, b in zip(n_list, n_list[1:])):
            raise ConfigError("n_list must be strictly increasing")
        if n_list[0] < 2:
            raise ConfigError("experiments need n >= 2")
        object.__setattr__(self, "n_list", n_list)
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        if self.metric not in (None, "l2", "hellinger"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        density = self.model.kind is ModelKind.DENSITY
        histogram = density and self.model.density_param is DensityParam.HISTOGRAM
        if histogram != (self.prior.kind is PriorKind.DIRICHLET):
            raise ConfigError("the Dirichlet prior pairs with histogram density data only")

    @property
    def density(self) -> bool:
        return self.model.kind is ModelKind.DENSITY

    @property
    def histogram(self) -> bool:
        return self.density and self.model.density_param is DensityParam.HISTOGRAM

    @property
    def radius_metric(self) -> str:
        return self.metric or ("hellinger" if self.density else "l2")

    def prior_at(self, n: int) -> PriorSpec:
        """Prior with the truncation that applies at sample size ``n``."""
        p = self.prior
        if p.kind in (PriorKind.SCALED_GAUSSIAN, PriorKind.REGULARITY_GAUSSIAN) and p.trunc is None:
            return PriorSpec(p.kind, alpha=p.alpha, tau=p.tau,
                             trunc=DENSITY_GAUSSIAN_TRUNC if self.density else n)
        return p

    def grid(self, n: int) -> HyperGrid:
        if self.grid_values is not None:
            return HyperGrid(np.asarray(self.grid_values, float), self.prior.kind)
        return default_grid(self.prior.kind, n, alpha=self.prior.alpha, density=self.density,
                            points=self.grid_points)

    def truth_coeffs(self) -> np.ndarray:
        """Truth shared by every ``n``: coefficients, or bin masses for histograms."""
        if self.truth.coeffs is not None:
            return np.asarray(self.truth.coeffs, dtype=float)
        if self.density:
            dim = self.truth.dim or DENSITY_TRUTH_DIM
        else:
            dim = self.truth.dim or 2 * self.n_list[-1]
        theta0 = generate_truth(self.truth, dim).coeffs
        return histogram_truth(theta0) if self.histogram else theta0

    def to_dict(self) -> dict:
        out = {
            "model": {"kind": self.model.kind.value, "sigma": self.model.sigma,
                      "density_param": self.model.density_param.value},
            "prior": {"family": self.prior.kind.value, "alpha": self.prior.alpha,
                      "tau": self.prior.tau, "g": self.prior.g.value, "trunc": self.prior.trunc},
            "truth": {"kind": self.truth.kind.value, "beta": self.truth.beta, "L": self.truth.L,
                      "dim": self.truth.dim,
                      "coeffs": list(self.truth.coeffs) if self.truth.coeffs else None},
            "n_list": list(self.n_list),
            "replicates": self.replicates,
            "base_seed": self.base_seed,
            "grid": {"points": self.grid_points,
                     "values": list(self.grid_values) if self.grid_values else None},
            "metric": self.radius_metric,
            "level": self.level,
            "hyperprior": asdict(self.hyperprior) if self.hyperprior else None,
            "rates": asdict(self.rates),
            "radius_draws": self.radius_draws,
            "mc_draws": self.mc_draws,
            "mcmc": self.mcmc,
            "n_jobs": self.n_jobs,
            "record_timing": self.record_timing,
            "delta": self.delta,
            "output": self.output,
        }
        return out

    @classmethod
    def from_dict(cls, raw: dict, **overrides) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a mapping")
        raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
        known = {"model", "prior", "truth", "n_list", "n", "replicates", "base_seed", "grid",
                 "metric", "level", "hyperprior", "rates", "radius_draws", "mc_draws", "mcmc",
                 "n_jobs", "record_timing", "delta", "output"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        try:
            m = dict(raw.get("model") or {})
            model = ModelSpec(m.pop("kind", "white_noise"), 2, m.pop("sigma", 1.0),
                              m.pop("density_param", "loglinear"))
            _no_leftovers("model", m)
            p = dict(raw.get("prior") or {})
            family = p.pop("family", None)
            if family is None:
                raise ConfigError("prior.family is required")
            prior = PriorSpec(family, g=p.pop("g", "gaussian"), alpha=float(p.pop("alpha", 1.0)),
                              tau=float(p.pop("tau", 1.0)), trunc=p.pop("trunc", None))
            _no_leftovers("prior", p)
            t = dict(raw.get("truth") or {})
            coeffs = t.pop("coeffs", None)
            truth = TruthSpec(t.pop("kind", "hyperrect"), float(t.pop("beta", 1.0)),
                              float(t.pop("L", 1.0)), t.pop("dim", None), 0,
                              tuple(float(c) for c in coeffs) if coeffs else None)
            _no_leftovers("truth", t)
            n_list = raw.get("n_list", [raw["n"]] if "n" in raw else None)
            if n_list is None:
                raise ConfigError("n_list (or n) is required")
            g = dict(raw.get("grid") or {})
            values = g.pop("values", None)
            points = int(g.pop("points", 60))
            _no_leftovers("grid", g)
            hp = raw.get("hyperprior")
            hyper = HyperPrior(**hp) if hp else None
            if hyper is not None:
                hyper.logpdf(1.0)
            rates = RateOptions(**(raw.get("rates") or {}))
            return cls(model, prior, truth, tuple(n_list),
                       replicates=int(raw.get("replicates", 1)),
                       base_seed=int(raw.get("base_seed", 0)),
                       grid_points=points,
                       grid_values=tuple(float(v) for v in values) if values else None,
                       metric=raw.get("metric"), level=float(raw.get("level", 0.95)),
                       hyperprior=hyper, rates=rates,
                       radius_draws=int(raw.get("radius_draws", 1000)),
                       mc_draws=int(raw.get("mc_draws", 10_000)),
                       mcmc=raw.get("mcmc"), n_jobs=int(raw.get("n_jobs", 1)),
                       record_timing=bool(raw.get("record_timing", False)),
                       delta=float(raw.get("delta", 0.1)), output=raw.get("output"))
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError, ParameterError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_yaml(cls, path, **overrides) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
        return cls.from_dict(raw or {}, **overrides)


def _no_leftovers(section: str, d: dict):
    if d:
        raise ConfigError(f"unknown keys in {section}: {sorted(d)}")


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentRecord:
    n: int
    replicate: int
    seed: int
    lambda_hat: float
    eps_n_hat: float
    eps_n0: float
    in_lambda0: bool
    radius_eb: float
    radius_hb: float
    loss_mean_eb: float
    wall_time: float
    status: str = "ok"


FIELDS = [f.name for f in fields(ExperimentRecord)]
NAN = float("nan")


def replicate_seed(base_seed: int, n: int, replicate: int) -> int:
    """63-bit seed derived from ``(base_seed, n, replicate)``."""
    words = np.random.SeedSequence([int(base_seed), int(n), int(replicate)]).generate_state(2)
    return int((int(words[0]) << 31) ^ int(words[1]))


def _truth_for_distance(config: ExperimentConfig, theta0: np.ndarray):
    if config.histogram:
        return DensityTable(theta0 * theta0.size, "cells")
    return theta0


def _rate_truth(config: ExperimentConfig, theta0):
    return DensityTable(theta0 * theta0.size, "cells") if config.histogram else theta0


def compute_rate_curve(config: ExperimentConfig, n: int, theta0=None) -> RateCurve:
    theta0 = config.truth_coeffs() if theta0 is None else theta0
    opt = config.rates
    prior = config.prior_at(n)
    return rate_curve(prior, config.grid(n), _rate_truth(config, theta0), n, opt.K, Mn=opt.Mn,
                      mn=opt.mn, draws=opt.draws, seed=opt.seed, rtol=opt.rtol,
                      dim=prior.trunc or n,
                      metric="hellinger" if config.histogram else "l2")


def run_replicate(config: ExperimentConfig, n: int, replicate: int, theta0: np.ndarray,
                  curve: RateCurve | None) -> ExperimentRecord:
    seed = replicate_seed(config.base_seed, n, replicate)
    start = time.perf_counter()
    values = dict(lambda_hat=NAN, eps_n_hat=NAN, eps_n0=NAN, in_lambda0=False, radius_eb=NAN,
                  radius_hb=NAN, loss_mean_eb=NAN)
    status = "ok"
    try:
        ss = np.random.SeedSequence(seed)
        s_data, s_marg, s_post, s_rad, s_hb, s_hbrad = ss.spawn(6)
        data = simulate(config.model.with_n(n), theta0, int(s_data.generate_state(1)[0]))
        prior = config.prior_at(n)
        grid = config.grid(n)
        marg = marginal_curve(data, prior, grid, mc_draws=config.mc_draws, seed=s_marg)
        lam = mmle(marg)
        values["lambda_hat"] = lam
        metric = config.radius_metric
        truth = _truth_for_distance(config, theta0)
        post = eb_posterior(data, prior, lam, seed=s_post, mcmc=config.mcmc)
        values["radius_eb"] = contraction_radius(post, truth, config.level,
                                                 config.radius_draws, s_rad, metric)
        values["loss_mean_eb"] = float(distances(post.mean()[None, :], truth, metric,
                                                 post.space)[0])
        if curve is not None:
            eps, member = curve.at(lam)
            values.update(eps_n_hat=eps, eps_n0=curve.eps0, in_lambda0=member)
        if config.hyperprior is not None:
            hb = hb_posterior(data, prior, grid, config.hyperprior, marg, seed=s_hb,
                              mcmc=config.mcmc)
            values["radius_hb"] = contraction_radius(hb, truth, config.level,
                                                     config.radius_draws, s_hbrad, metric)
    except (NumericalError, ParameterError, FloatingPointError, ValueError) as exc:
        status = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
    wall = time.perf_counter() - start if config.record_timing else NAN
    return ExperimentRecord(n, replicate, seed, wall_time=wall, status=status, **values)


def _run_cell(args):
    return run_replicate(*args)


def run_experiment(config: ExperimentConfig, rate_cache: dict | None = None,
                   progress=None) -> list[ExperimentRecord]:
    """Run every ``(n, replicate)`` cell and return the record table.

    Rows are ordered by ``(n, replicate)``; each row depends only on its own
    derived seed, so the table is reproducible and order independent.
    """
    theta0 = config.truth_coeffs()
    rate_cache = {} if rate_cache is None else rate_cache
    jobs = []
    for n in config.n_list:
        curve = None
        if config.rates.enabled:
            key = (n, config.rates, config.prior_at(n), config.truth)
            if key not in rate_cache:
                rate_cache[key] = compute_rate_curve(config, n, theta0)
            curve = rate_cache[key]
        jobs.extend((config, n, r, theta0, curve) for r in range(config.replicates))
    if config.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
            records = list(pool.map(_run_cell, jobs, chunksize=max(1, len(jobs) // (4 * config.n_jobs))))
    else:
        records = []
        for job in jobs:
            records.append(_run_cell(job))
            if progress:
                progress(records[-1])
    return sorted(records, key=lambda r: (r.n, r.replicate))


# --------------------------------------------------------------------------
# summaries
# --------------------------------------------------------------------------


class ExponentFit(NamedTuple):
    slope: float
    stderr: float
    intercept: float


def medians_by_n(table: Iterable[ExperimentRecord], column: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-``n`` medians of a column, ignoring failed rows and NaNs."""
    groups: dict[int, list[float]] = {}
    for rec in table:
        v = float(getattr(rec, column))
        if rec.status == "ok" and math.isfinite(v):
            groups.setdefault(rec.n, []).append(v)
    ns = np.array(sorted(groups), dtype=float)
    return ns, np.array([np.median(groups[int(n)]) for n in ns])


def fit_rate_exponent(table, column: str = "radius_eb") -> ExponentFit:
    """OLS of ``log(median column)`` on ``log n``."""
    ns, med = medians_by_n(table, column)
    if ns.size < 3:
        raise ParameterError("need at least three distinct n values to fit an exponent")
    if np.any(med <= 0):
        raise ParameterError(f"nonpositive median in column {column!r}")
    fit = linregress(np.log(ns), np.log(med))
    return ExponentFit(float(fit.slope), float(fit.stderr), float(fit.intercept))


class Localization(NamedTuple):
    n: int
    fraction: float
    ci_low: float
    ci_high: float
    count: int


def mmle_localization_summary(table, confidence: float = 0.95) -> list[Localization]:
    """Per-``n`` frequency of the MMLE landing in the oracle set, with Clopper-Pearson CI."""
    rows = [r for r in table if r.status == "ok"]
    if not rows:
        raise ParameterError("empty table")
    out = []
    for n in sorted({r.n for r in rows}):
        flags = [bool(r.in_lambda0) for r in rows if r.n == n]
        k = sum(flags)
        ci = binomtest(k, len(flags)).proportion_ci(confidence)
        out.append(Localization(n, k / len(flags), float(ci.low), float(ci.high), len(flags)))
    return out


class RatioSummary(NamedTuple):
    n: int
    median: float
    q25: float
    q75: float


def eb_hb_comparison(table) -> list[RatioSummary]:
    """Per-``n`` median and quartiles of ``radius_hb / radius_eb``."""
    rows = [r for r in table if r.status == "ok"]
    if not rows or not any(math.isfinite(r.radius_hb) for r in rows):
        raise ParameterError("table has no hierarchical radii")
    out = []
    for n in sorted({r.n for r in rows}):
        ratio = np.array([r.radius_hb / r.radius_eb for r in rows
                          if r.n == n and math.isfinite(r.radius_hb) and r.radius_eb > 0])
        q25, med, q75 = np.percentile(ratio, [25, 50, 75])
        out.append(RatioSummary(n, float(med), float(q25), float(q75)))
    return out


def summarize(table, config: ExperimentConfig | None = None) -> dict:
    """Summary block of the manifest."""
    ok = [r for r in table if r.status == "ok"]
    out: dict = {"rows": len(table), "failed": len(table) - len(ok)}
    for col in ("radius_eb", "radius_hb", "loss_mean_eb", "eps_n0", "lambda_hat"):
        try:
            out[f"fit_{col}"] = fit_rate_exponent(table, col)._asdict()
        except ParameterError:
            pass
    if ok and any(math.isfinite(r.eps_n0) for r in ok):
        out["localization"] = [x._asdict() for x in mmle_localization_summary(table)]
    try:
        out["eb_hb"] = [x._asdict() for x in eb_hb_comparison(table)]
    except ParameterError:
        pass
    if config is not None and ok and any(math.isfinite(r.eps_n0) for r in ok):
        # lower-bound diagnostic: share of rows whose radius falls below delta * eps0
        out["below_delta_eps0"] = float(np.mean(
            [r.radius_eb < config.delta * r.eps_n0 for r in ok if math.isfinite(r.eps_n0)]))
    return out


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def write_records(table, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELDS)
        for rec in table:
            w.writerow([format_value(getattr(rec, f)) for f in FIELDS])
    return path


def read_records(path) -> list[ExperimentRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != FIELDS:
            raise ParameterError(f"unexpected header {header}")
        out = []
        for row in reader:
            d = dict(zip(FIELDS, row))
            out.append(ExperimentRecord(
                n=int(d["n"]), replicate=int(d["replicate"]), seed=int(d["seed"]),
                lambda_hat=float(d["lambda_hat"]), eps_n_hat=float(d["eps_n_hat"]),
                eps_n0=float(d["eps_n0"]), in_lambda0=d["in_lambda0"] == "true",
                radius_eb=float(d["radius_eb"]), radius_hb=float(d["radius_hb"]),
                loss_mean_eb=float(d["loss_mean_eb"]), wall_time=float(d["wall_time"]),
                status=d["status"]))
        return out


def write_table(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])
    return path


def git_hash() -> str | None:
    try:
        res = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    if res.returncode != 0:
        return None
    return res.stdout.strip() or None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_manifest(path, config: dict, summaries: dict) -> Path:
    manifest = {
        "config": _jsonable(config),
        "summaries": _jsonable(summaries),
        "version": {"package": __version__, "git": git_hash()},
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def plot_rows(table, columns=("radius_eb", "radius_hb")):
    """Per-``n`` medians and fitted power-law values for each column."""
    ns = sorted({r.n for r in table})
    header = ["n"]
    cols = []
    for col in columns:
        try:
            fit = fit_rate_exponent(table, col)
        except ParameterError:
            continue
        n_med, med = medians_by_n(table, col)
        lookup = dict(zip(n_med.astype(int), med))
        header += [f"median_{col}", f"fitted_{col}"]
        cols.append((lookup, fit))
    rows = []
    for n in ns:
        row = [n]
        for lookup, fit in cols:
            row += [lookup.get(n, NAN), float(np.exp(fit.intercept + fit.slope * np.log(n)))]
        rows.append(row)
    return header, rows


def emit_outputs(table, out_dir, config: ExperimentConfig | None = None,
                 plot: bool = True) -> dict[str, Path]:
    """Write ``records.csv``, ``manifest.json``, ``plot_data.csv`` and a rate-fit figure."""
    if not table:
        raise ParameterError("nothing to write: empty table")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = {"records": write_records(table, out / "records.csv")}
    summaries = summarize(table, config)
    paths["manifest"] = write_manifest(out / "manifest.json",
                                       config.to_dict() if config else {}, summaries)
    header, rows = plot_rows(table)
    paths["plot_data"] = write_table(out / "plot_data.csv", header, rows)
    if plot and len(header) > 1:
        from .plotting import plot_rate_fit

        paths["figure"] = plot_rate_fit(table, out / "rate_fit.png")
    return paths
