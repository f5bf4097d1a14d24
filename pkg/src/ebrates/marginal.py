"""Log marginal likelihoods ``log m(x | lam)`` for every model/prior pairing.

Conjugate pairs are evaluated in closed form. The log-linear density model is
handled by plain prior-sampling Monte Carlo with a jackknife standard error.
All values include the full data density, never a ratio to the truth.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln, log_ndtr, logsumexp
from scipy.stats import norm

from .errors import NumericalError, ParameterError
from .models import as_seed_sequence
from .models import Dataset, DensityParam, ModelKind, loglinear_loglik, sequence_form
from .priors import (
    GAUSSIAN_KINDS,
    CoordDensity,
    HyperGrid,
    PriorKind,
    PriorSpec,
    gaussian_sds,
    prior_draws,
)

LOG_HALF = np.log(0.5)


class Method(str, enum.Enum):
    EXACT = "exact"
    MONTE_CARLO = "monte_carlo"


class MCEstimate(NamedTuple):
    value: float
    se: float
    underflow: bool = False


@dataclass(frozen=True, eq=False)
class MarginalCurve:
    grid: HyperGrid
    logm: np.ndarray
    method: Method
    mc_se: np.ndarray | None = None

    def __post_init__(self):
        logm = np.asarray(self.logm, dtype=float)
        if logm.shape != (len(self.grid),):
            raise ParameterError("curve length does not match its grid")
        object.__setattr__(self, "logm", logm)


def _gaussian_logm(y, v, prior_var, logjac) -> float:
    return float(np.sum(norm.logpdf(y, scale=np.sqrt(prior_var + v)))) + logjac


def log_marginal_gaussian_seq(data: Dataset, alpha: float, tau: float) -> float:
    """Exact log marginal under the Gaussian prior truncated at n coordinates."""
    if data.model.kind is ModelKind.DENSITY:
        raise ParameterError("Gaussian-sequence marginal needs white noise or regression data")
    if not (alpha > 0 and tau > 0):
        raise ParameterError("alpha and tau must be positive")
    y, v, logjac = sequence_form(data)
    sd = gaussian_sds(alpha, tau, y.size)
    return _gaussian_logm(y, v, sd**2, logjac)


def laplace_gaussian_logconv(y, v):
    """``log int N(y; theta, v) (1/2) e^{-|theta|} dtheta`` in closed form."""
    y = np.asarray(y, dtype=float)
    s = np.sqrt(v)
    plus = -y + log_ndtr((y - v) / s)
    minus = y + log_ndtr((-y - v) / s)
    return LOG_HALF + v / 2 + np.logaddexp(plus, minus)


def sieve_coordinate_terms(y, v, g=CoordDensity.GAUSSIAN):
    """Per-coordinate log marginals: (inside the sieve, outside the sieve)."""
    outside = norm.logpdf(y, scale=np.sqrt(v))
    if CoordDensity(g) is CoordDensity.GAUSSIAN:
        inside = norm.logpdf(y, scale=np.sqrt(1.0 + v))
    else:
        inside = laplace_gaussian_logconv(y, v)
    return inside, outside


def log_marginal_sieve(data: Dataset, k: int, g=CoordDensity.GAUSSIAN) -> float:
    """Exact log marginal under the sieve prior with truncation ``k``."""
    if data.model.kind is ModelKind.DENSITY:
        raise ParameterError("sieve marginal here needs white noise or regression data")
    y, v, logjac = sequence_form(data)
    if not 1 <= k <= y.size or int(k) != k:
        raise ParameterError(f"truncation k={k} outside 1..{y.size}")
    inside, outside = sieve_coordinate_terms(y, v, g)
    k = int(k)
    return float(inside[:k].sum() + outside[k:].sum()) + logjac


def bin_counts(samples, k: int) -> np.ndarray:
    """Counts over the bins ((j-1)/k, j/k]; the point 0 goes to the first bin."""
    idx = np.clip(np.ceil(np.asarray(samples) * k).astype(int) - 1, 0, k - 1)
    return np.bincount(idx, minlength=k)


def log_marginal_histogram(data: Dataset, k: int, alpha: float = 1.0) -> float:
    """Dirichlet-multinomial log marginal of the ``k``-bin random histogram."""
    if k < 1 or int(k) != k:
        raise ParameterError(f"number of bins must be a positive integer, got {k}")
    if alpha <= 0:
        raise ParameterError("Dirichlet concentration must be positive")
    counts = bin_counts(data.obs, int(k))
    n = counts.sum()
    return float(n * np.log(k) + gammaln(k * alpha) - gammaln(k * alpha + n)
                 + np.sum(gammaln(alpha + counts) - gammaln(alpha)))


def log_mean_exp_jackknife(logw: np.ndarray) -> MCEstimate:
    """``log mean exp(logw)`` with a leave-one-out jackknife standard error."""
    logw = np.asarray(logw, dtype=float)
    D = logw.size
    if not np.any(np.isfinite(logw)):
        return MCEstimate(float("-inf"), float("inf"), True)
    m = logw.max()
    w = np.exp(logw - m)
    total = w.sum()
    est = m + np.log(total / D)
    rest = np.clip(total - w, np.finfo(float).tiny, None)
    loo = m + np.log(rest / (D - 1))
    se = np.sqrt((D - 1) / D * np.sum((loo - loo.mean()) ** 2))
    return MCEstimate(float(est), float(se), False)


def log_marginal_loglinear(data: Dataset, lam, prior: PriorSpec, mc_draws: int = 10_000,
                           seed=0, chunk: int = 2000) -> MCEstimate:
    """Monte Carlo log marginal of the log-linear density model."""
    if mc_draws < 1000:
        raise ParameterError("use at least 1000 Monte Carlo draws")
    if prior.kind is PriorKind.DIRICHLET:
        raise ParameterError("Dirichlet priors belong to the histogram parameterization")
    rng = np.random.default_rng(seed)
    logw = np.empty(mc_draws)
    for start in range(0, mc_draws, chunk):
        stop = min(start + chunk, mc_draws)
        thetas = prior_draws(prior, lam, stop - start, rng)
        logw[start:stop] = loglinear_loglik(thetas, data.obs)
    return log_mean_exp_jackknife(logw)


def _exact_evaluator(data: Dataset, prior: PriorSpec):
    model = data.model
    if model.kind is ModelKind.DENSITY:
        if model.density_param is DensityParam.HISTOGRAM:
            if prior.kind is not PriorKind.DIRICHLET:
                raise ParameterError("histogram data pairs with the Dirichlet prior")
            return lambda lam: log_marginal_histogram(data, int(lam), prior.alpha)
        return None
    if prior.kind is PriorKind.DIRICHLET:
        raise ParameterError("Dirichlet priors need histogram density data")
    y, v, logjac = sequence_form(data)
    if prior.kind is PriorKind.SIEVE:
        inside, outside = sieve_coordinate_terms(y, v, prior.g)
        # prefix sums give every truncation level at once
        cin = np.concatenate([[0.0], np.cumsum(inside)])
        cout = np.concatenate([[0.0], np.cumsum(outside[::-1])])[::-1]

        def sieve(lam):
            k = int(lam)
            if not 1 <= k <= y.size:
                raise ParameterError(f"truncation k={k} outside 1..{y.size}")
            return float(cin[k] + cout[k]) + logjac
        return sieve
    if prior.kind is PriorKind.SCALED_GAUSSIAN:
        return lambda lam: _gaussian_logm(y, v, gaussian_sds(prior.alpha, lam, y.size) ** 2, logjac)
    return lambda lam: _gaussian_logm(y, v, gaussian_sds(lam, prior.tau, y.size) ** 2, logjac)


def marginal_curve(data: Dataset, prior: PriorSpec, grid: HyperGrid, *,
                   mc_draws: int = 10_000, seed=0) -> MarginalCurve:
    """Evaluate the log marginal at every grid point."""
    if grid.family is not prior.kind:
        raise ParameterError("grid family does not match the prior")
    evaluate = _exact_evaluator(data, prior)
    logm = np.empty(len(grid))
    if evaluate is not None:
        for i, lam in enumerate(grid.values):
            try:
                logm[i] = evaluate(lam)
            except (ParameterError, FloatingPointError) as exc:
                raise ParameterError(f"{prior.hyper_name}={lam}: {exc}") from exc
        return MarginalCurve(grid, logm, Method.EXACT)
    if prior.kind in GAUSSIAN_KINDS and prior.trunc is None:
        raise ParameterError("set a truncation level for Gaussian priors on densities")
    se = np.empty(len(grid))
    children = as_seed_sequence(seed).spawn(len(grid))
    for i, lam in enumerate(grid.values):
        est = log_marginal_loglinear(data, lam, prior, mc_draws, children[i])
        if est.underflow:
            raise NumericalError(f"{prior.hyper_name}={lam}: all Monte Carlo weights vanished")
        logm[i], se[i] = est.value, est.se
    return MarginalCurve(grid, logm, Method.MONTE_CARLO, se)
