"""MMLE, empirical Bayes and hierarchical Bayes posteriors, posterior summaries."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.integrate import simpson
from scipy.special import log_ndtr, logsumexp
from scipy.stats import truncnorm

from .errors import NumericalError, ParameterError
from .models import as_seed_sequence
from .marginal import MarginalCurve, bin_counts, marginal_curve
from .models import (
    QUAD_POINTS,
    Dataset,
    DensityParam,
    DensityTable,
    ModelKind,
    _cosine_basis,
    as_coeffs,
    cosine_basis,
    loglinear_density,
    pad_to,
    sequence_form,
    sqrt_bin_masses,
)
from .priors import (
    GAUSSIAN_KINDS,
    CoordDensity,
    HyperGrid,
    HyperPrior,
    PriorKind,
    PriorSpec,
    prior_sds,
)

SEQUENCE, HISTOGRAM, LOGLINEAR = "sequence", "histogram", "loglinear"


def mmle(curve: MarginalCurve) -> float:
    """Grid maximizer of the log marginal; ties go to the smallest value."""
    logm = curve.logm
    bad = np.flatnonzero(np.isnan(logm))
    if bad.size:
        raise NumericalError(f"log marginal is NaN at lambda={curve.grid.values[bad[0]]}")
    return float(curve.grid.values[int(np.argmax(logm))])


# --------------------------------------------------------------------------
# posterior handles
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GaussianSeqPosterior:
    """Independent Gaussian coordinates (conjugate Gaussian or Gaussian sieve)."""

    mean_: np.ndarray
    var: np.ndarray
    prior_var: np.ndarray
    kind: str = "conjugate_gaussian_seq"
    space: str = SEQUENCE

    def __post_init__(self):
        if np.any(self.var < 0):
            raise ParameterError("posterior variances must be nonnegative")

    def mean(self) -> np.ndarray:
        return self.mean_

    def sample(self, draws: int, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        return self.mean_ + np.sqrt(self.var) * rng.standard_normal((draws, self.mean_.size))


@dataclass(frozen=True, eq=False)
class LaplaceSievePosterior:
    """Sieve posterior with Laplace coordinates: two truncated normals per coordinate."""

    y: np.ndarray
    v: np.ndarray
    k: int
    kind: str = "sieve_coord"
    space: str = SEQUENCE

    def _pieces(self):
        y, v = self.y[: self.k], self.v[: self.k]
        s = np.sqrt(v)
        mu_pos, mu_neg = y - v, y + v
        log_pos = -y + log_ndtr(mu_pos / s)
        log_neg = y + log_ndtr(-mu_neg / s)
        p_pos = np.exp(log_pos - np.logaddexp(log_pos, log_neg))
        return mu_pos, mu_neg, s, p_pos

    def mean(self) -> np.ndarray:
        mu_pos, mu_neg, s, p_pos = self._pieces()
        a_pos, a_neg = mu_pos / s, mu_neg / s
        log_pdf = lambda a: -0.5 * a**2 - 0.5 * np.log(2 * np.pi)
        m_pos = mu_pos + s * np.exp(log_pdf(a_pos) - log_ndtr(a_pos))
        m_neg = mu_neg - s * np.exp(log_pdf(a_neg) - log_ndtr(-a_neg))
        out = np.zeros(self.y.size)
        out[: self.k] = p_pos * m_pos + (1 - p_pos) * m_neg
        return out

    def sample(self, draws: int, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        mu_pos, mu_neg, s, p_pos = self._pieces()
        out = np.zeros((draws, self.y.size))
        pos = rng.random((draws, self.k)) < p_pos
        lo = np.where(pos, -mu_pos / s, -np.inf)
        hi = np.where(pos, np.inf, -mu_neg / s)
        loc = np.where(pos, mu_pos, mu_neg)
        out[:, : self.k] = truncnorm.rvs(lo, hi, loc=loc, scale=s, random_state=rng)
        return out


@dataclass(frozen=True, eq=False)
class DirichletPosterior:
    params: np.ndarray
    kind: str = "dirichlet_hist"
    space: str = HISTOGRAM

    def __post_init__(self):
        if np.any(self.params <= 0):
            raise ParameterError("Dirichlet parameters must be positive")

    def mean(self) -> np.ndarray:
        return self.params / self.params.sum()

    def sample(self, draws: int, rng) -> np.ndarray:
        return np.random.default_rng(rng).dirichlet(self.params, size=draws)


@dataclass(frozen=True, eq=False)
class MCMCPosterior:
    chain: np.ndarray
    acceptance: float
    step: float
    kind: str = "loglinear_mcmc"
    space: str = LOGLINEAR
    warning: str | None = None

    def mean(self) -> np.ndarray:
        return self.chain.mean(axis=0)

    def mcse(self, batches: int = 50) -> np.ndarray:
        """Batch-means Monte Carlo standard error of the chain mean."""
        m = self.chain.shape[0] // batches
        means = self.chain[: m * batches].reshape(batches, m, -1).mean(axis=1)
        return means.std(axis=0, ddof=1) / np.sqrt(batches)

    def sample(self, draws: int, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        return self.chain[rng.integers(0, self.chain.shape[0], size=draws)]


@dataclass(eq=False)
class HBPosterior:
    """Mixture of EB posteriors weighted by the hyper-posterior on the grid."""

    grid: HyperGrid
    weights: np.ndarray
    build: object = field(repr=False)
    _components: dict = field(default_factory=dict, repr=False)
    negligible: float = 1e-16

    def component(self, i: int):
        if i not in self._components:
            self._components[i] = self.build(self.grid.values[i])
        return self._components[i]

    @property
    def space(self) -> str:
        return self.component(int(np.argmax(self.weights))).space

    def mean(self) -> np.ndarray:
        """Weighted mean of the component means (coefficient spaces only)."""
        if self.space == HISTOGRAM:
            raise ParameterError("histograms with different bin counts share no coefficient vector")
        active = np.flatnonzero(self.weights > self.negligible)
        means = [self.component(i).mean() for i in active]
        m = max(x.size for x in means)
        return sum(self.weights[i] * pad_to(x, m) for i, x in zip(active, means))

    def sample(self, draws: int, rng) -> np.ndarray:
        """Mixture draws, zero-padded to a common width.

        Padding is only meaningful for coefficient spaces; histogram mixtures
        should go through :func:`posterior_distances`.
        """
        parts = [p for _, p in self.sample_parts(draws, rng)]
        m = max(p.shape[1] for p in parts)
        return np.vstack([pad_to(p, m) for p in parts])

    def sample_parts(self, draws: int, rng):
        """``(component index, draws)`` pairs with multinomial allocation."""
        rng = np.random.default_rng(rng)
        counts = rng.multinomial(draws, self.weights)
        return [(i, self.component(i).sample(int(c), rng)) for i, c in enumerate(counts) if c > 0]


def posterior_mean(post) -> np.ndarray:
    return post.mean()


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------


def gaussian_seq_posterior(y, v, prior_var, kind="conjugate_gaussian_seq") -> GaussianSeqPosterior:
    shrink = prior_var / (prior_var + v)
    return GaussianSeqPosterior(y * shrink, v * shrink, prior_var, kind)


def random_walk_metropolis(logpost, dim: int, rng, *, step: float | None = None,
                           burn: int = 5000, keep: int = 20_000, thin: int = 2,
                           start=None):
    """Random-walk Metropolis with isotropic Gaussian proposals.

    Returns ``(chain, acceptance_rate, step)``.
    """
    rng = np.random.default_rng(rng)
    step = 0.3 / np.sqrt(dim) if step is None else step
    theta = np.zeros(dim) if start is None else np.array(start, dtype=float)
    lp = logpost(theta)
    total = burn + keep * thin
    noise = rng.standard_normal((total, dim)) * step
    log_u = np.log(rng.random(total))
    chain = np.empty((keep, dim))
    accepted = 0
    for it in range(total):
        prop = theta + noise[it]
        lp_prop = logpost(prop)
        if log_u[it] < lp_prop - lp:
            theta, lp = prop, lp_prop
            if it >= burn:
                accepted += 1
        if it >= burn and (it - burn) % thin == thin - 1:
            chain[(it - burn) // thin] = theta
    return chain, accepted / (keep * thin), step


def _loglinear_logpost(data: Dataset, spec: PriorSpec):
    if spec.kind is PriorKind.SIEVE:
        dim = spec.k
        if spec.g is CoordDensity.GAUSSIAN:
            logprior = lambda th: -0.5 * th @ th
        else:
            logprior = lambda th: -np.abs(th).sum()
    elif spec.kind in GAUSSIAN_KINDS:
        dim = spec.trunc
        prec = 1.0 / prior_sds(spec) ** 2
        logprior = lambda th: -0.5 * th @ (prec * th)
    else:
        raise ParameterError("log-linear posteriors need a sieve or Gaussian prior")
    phi = _cosine_basis(dim, QUAD_POINTS)
    weights = simpson(np.eye(QUAD_POINTS), dx=1.0 / (QUAD_POINTS - 1), axis=0)
    stats = cosine_basis(dim, data.obs).sum(axis=1)
    n = data.model.n

    def logpost(th):
        s = th @ phi
        smax = s.max()
        c = smax + np.log(weights @ np.exp(s - smax))
        return th @ stats - n * c + logprior(th)
    return logpost, dim


def eb_posterior(data: Dataset, prior: PriorSpec, lam, *, seed=0, mcmc: dict | None = None):
    """Posterior at the plugged-in hyper-parameter ``lam``."""
    spec = prior.at(lam)
    model = data.model
    if model.kind is ModelKind.DENSITY:
        if model.density_param is DensityParam.HISTOGRAM:
            if spec.kind is not PriorKind.DIRICHLET:
                raise ParameterError("histogram data pairs with the Dirichlet prior")
            spec.validate()
            return DirichletPosterior(spec.alpha + bin_counts(data.obs, spec.k))
        logpost, dim = _loglinear_logpost(data, spec.validate())
        chain, acc, step = random_walk_metropolis(logpost, dim, seed, **(mcmc or {}))
        warn = None
        if not 0.1 <= acc <= 0.6:
            warn = f"acceptance rate {acc:.3f} outside [0.1, 0.6]"
            warnings.warn(warn, RuntimeWarning, stacklevel=2)
        return MCMCPosterior(chain, acc, step, warning=warn)
    y, v, _ = sequence_form(data)
    if spec.kind is PriorKind.DIRICHLET:
        raise ParameterError("Dirichlet priors need histogram density data")
    if spec.kind is PriorKind.SIEVE:
        spec.validate()
        if spec.k > y.size:
            raise ParameterError(f"truncation k={spec.k} exceeds n={y.size}")
        if spec.g is CoordDensity.LAPLACE:
            return LaplaceSievePosterior(y, v, spec.k)
        prior_var = np.zeros(y.size)
        prior_var[: spec.k] = 1.0
        return gaussian_seq_posterior(y, v, prior_var, kind="sieve_coord")
    spec = PriorSpec(spec.kind, alpha=spec.alpha, tau=spec.tau, trunc=y.size)
    return gaussian_seq_posterior(y, v, prior_sds(spec) ** 2)


def hb_posterior(data: Dataset, prior: PriorSpec, grid: HyperGrid, hyperprior: HyperPrior,
                 curve: MarginalCurve | None = None, *, seed=0, mcmc: dict | None = None,
                 mc_draws: int = 10_000) -> HBPosterior:
    """Hierarchical posterior with the hyper-parameter integrated over ``grid``."""
    if curve is None:
        curve = marginal_curve(data, prior, grid, mc_draws=mc_draws, seed=seed)
    logpi = np.asarray(hyperprior.logpdf(grid.values, grid), dtype=float)
    logw = curve.logm + logpi + np.log(grid.cell_widths())
    if not np.any(np.isfinite(logw)):
        raise NumericalError("every hierarchical weight underflowed")
    if np.any(np.isnan(logw)):
        raise NumericalError("NaN hierarchical weight")
    weights = np.exp(logw - logsumexp(logw))
    weights /= weights.sum()
    children = as_seed_sequence(seed).spawn(len(grid))
    index = {float(lam): i for i, lam in enumerate(grid.values)}
    build = lambda lam: eb_posterior(data, prior, lam, seed=children[index[float(lam)]], mcmc=mcmc)
    return HBPosterior(grid, weights, build)


# --------------------------------------------------------------------------
# summaries
# --------------------------------------------------------------------------


def _truth_table(theta0, space: str):
    if isinstance(theta0, DensityTable):
        return theta0
    arr = as_coeffs(theta0)
    if space == HISTOGRAM:
        return DensityTable(arr / arr.sum() * arr.size, "cells")
    return loglinear_density(arr)


def distances(samples: np.ndarray, theta0, metric: str = "l2", space: str = SEQUENCE,
              chunk: int = 512) -> np.ndarray:
    """Distance of each posterior draw (a row of ``samples``) to the truth.

    ``l2`` compares coefficient sequences. ``hellinger`` compares densities:
    histogram draws against the truth given as bin masses (or a table), and
    log-linear draws against ``f_theta0``.
    """
    samples = np.atleast_2d(samples)
    if metric == "l2":
        t0 = as_coeffs(theta0)
        m = samples.shape[1]
        if t0.size > m:
            tail = float(t0[m:] @ t0[m:])
            diff = samples - t0[:m]
        else:
            tail = 0.0
            diff = pad_to(samples, t0.size) - t0
        return np.sqrt(np.einsum("ij,ij->i", diff, diff) + tail)
    if metric != "hellinger":
        raise ParameterError(f"unknown metric {metric!r}")
    f0 = _truth_table(theta0, space)
    if space == HISTOGRAM:
        k = samples.shape[1]
        eta = sqrt_bin_masses(f0, k)
        h2 = 2.0 - 2.0 * np.sqrt(k) * (np.sqrt(np.clip(samples, 0, None)) @ eta)
        return np.sqrt(np.clip(h2, 0.0, 2.0))
    if space != LOGLINEAR:
        raise ParameterError("Hellinger distances need density draws")
    if f0.layout != "nodes" or f0.values.size != QUAD_POINTS:
        raise ParameterError("log-linear truth must be tabulated on the quadrature grid")
    x = np.linspace(0.0, 1.0, QUAD_POINTS)
    root0 = np.sqrt(f0.values)
    phi = _cosine_basis(samples.shape[1], QUAD_POINTS)
    out = np.empty(samples.shape[0])
    for a in range(0, samples.shape[0], chunk):
        s = samples[a:a + chunk] @ phi
        smax = s.max(axis=1, keepdims=True)
        c = smax[:, 0] + np.log(simpson(np.exp(s - smax), x=x, axis=1))
        root = np.exp((s - c[:, None]) / 2)
        out[a:a + chunk] = simpson((root - root0) ** 2, x=x, axis=1)
    return np.sqrt(np.clip(out, 0.0, 2.0))


def posterior_distances(post, theta0, draws: int, seed=0, metric: str = "l2") -> np.ndarray:
    """Distances to the truth of ``draws`` posterior draws (mixtures handled per component)."""
    if isinstance(post, HBPosterior):
        return np.concatenate([distances(x, theta0, metric, post.component(i).space)
                               for i, x in post.sample_parts(draws, seed)])
    return distances(post.sample(draws, seed), theta0, metric, post.space)


class BallMass(NamedTuple):
    prob: float
    se: float


def posterior_ball_mass(post, theta0, r: float, draws: int = 4000, seed=0,
                        metric: str = "l2") -> BallMass:
    """Posterior probability of ``{d(theta, theta0) <= r}`` by Monte Carlo."""
    if r < 0:
        raise ParameterError("radius must be nonnegative")
    if np.isinf(r):
        return BallMass(1.0, 0.0)
    d = posterior_distances(post, theta0, draws, seed, metric)
    p = float(np.mean(d <= r))
    return BallMass(p, float(np.sqrt(p * (1 - p) / draws)))


def nearest_rank_quantile(values, level: float) -> float:
    """Smallest value with at least ``level`` of the sample at or below it."""
    if not 0 < level < 1:
        raise ParameterError("level must lie in (0, 1)")
    v = np.sort(np.asarray(values, dtype=float))
    rank = int(np.ceil(level * v.size - 1e-12))
    return float(v[max(rank, 1) - 1])


def contraction_radius(post, theta0, level: float = 0.95, draws: int = 1000, seed=0,
                       metric: str = "l2") -> float:
    """Nearest-rank ``level``-quantile of posterior distances to the truth."""
    d = posterior_distances(post, theta0, draws, seed, metric)
    return nearest_rank_quantile(d, level)
