"""Prior families, hyper-parameter grids, hyper-priors and change-of-measure maps.

Four families are supported, each with one hyper-parameter ``lam``:

=====================  ===========  ===========================================
kind                   ``lam``      prior
=====================  ===========  ===========================================
``sieve``              ``k``        ``theta_j ~ g`` i.i.d. for ``j <= k``, 0 after
``scaled_gaussian``    ``tau``      ``theta_j ~ N(0, tau^2 j^{-2 alpha - 1})``
``regularity_gaussian`` ``alpha``   same, ``alpha`` is the hyper-parameter
``dirichlet``          ``k``        bin masses ``~ Dirichlet(alpha, ..., alpha)``
=====================  ===========  ===========================================

The two Gaussian families are truncated at ``trunc`` coordinates.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .errors import ParameterError
from .models import CoefficientVector, as_coeffs


class PriorKind(str, enum.Enum):
    SIEVE = "sieve"
    SCALED_GAUSSIAN = "scaled_gaussian"
    REGULARITY_GAUSSIAN = "regularity_gaussian"
    DIRICHLET = "dirichlet"


class CoordDensity(str, enum.Enum):
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"


DISCRETE_KINDS = (PriorKind.SIEVE, PriorKind.DIRICHLET)
GAUSSIAN_KINDS = (PriorKind.SCALED_GAUSSIAN, PriorKind.REGULARITY_GAUSSIAN)


@dataclass(frozen=True)
class PriorSpec:
    kind: PriorKind
    k: int | None = None
    g: CoordDensity = CoordDensity.GAUSSIAN
    alpha: float = 1.0
    tau: float = 1.0
    trunc: int | None = None
    alpha_cap: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PriorKind(self.kind))
        object.__setattr__(self, "g", CoordDensity(self.g))

    @property
    def hyper_name(self) -> str:
        return {PriorKind.SIEVE: "k", PriorKind.DIRICHLET: "k",
                PriorKind.SCALED_GAUSSIAN: "tau",
                PriorKind.REGULARITY_GAUSSIAN: "alpha"}[self.kind]

    @property
    def discrete(self) -> bool:
        return self.kind in DISCRETE_KINDS

    def at(self, lam) -> "PriorSpec":
        """Copy of this spec with the hyper-parameter slot set to ``lam``."""
        if self.discrete:
            if int(lam) != lam:
                raise ParameterError(f"{self.kind.value} needs an integer k, got {lam}")
            return replace(self, k=int(lam))
        return replace(self, **{self.hyper_name: float(lam)})

    def hyper_value(self):
        return getattr(self, self.hyper_name)

    def validate(self) -> "PriorSpec":
        kind = self.kind
        if kind is PriorKind.SIEVE and (self.k is None or self.k < 1):
            raise ParameterError(f"sieve truncation must be >= 1, got {self.k}")
        if kind is PriorKind.DIRICHLET:
            if self.k is None or self.k < 1:
                raise ParameterError(f"number of bins must be >= 1, got {self.k}")
            if not 0 < self.alpha <= self.alpha_cap:
                raise ParameterError(f"Dirichlet concentration must lie in (0, {self.alpha_cap}]")
        if kind in GAUSSIAN_KINDS:
            if not (self.alpha > 0 and self.tau > 0):
                raise ParameterError("alpha and tau must be positive")
            if self.trunc is None or self.trunc < 1:
                raise ParameterError("Gaussian priors need a truncation level")
        return self


@dataclass(frozen=True, eq=False)
class HyperGrid:
    values: np.ndarray
    family: PriorKind

    def __post_init__(self):
        vals = np.atleast_1d(np.asarray(self.values, dtype=float))
        if vals.size == 0 or not np.all(np.isfinite(vals)):
            raise ParameterError("hyper-parameter grid must be nonempty and finite")
        if np.any(np.diff(vals) <= 0):
            raise ParameterError("hyper-parameter grid must be strictly increasing")
        object.__setattr__(self, "family", PriorKind(self.family))
        if self.family in DISCRETE_KINDS and np.any(vals != np.round(vals)):
            raise ParameterError("discrete hyper-parameter grids must be integer")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return self.values.size

    def __iter__(self):
        return iter(self.values)

    def cell_widths(self) -> np.ndarray:
        """Trapezoidal cell widths (unit widths for discrete families)."""
        v = self.values
        if self.family in DISCRETE_KINDS or v.size == 1:
            return np.ones(v.size)
        w = np.empty(v.size)
        w[0] = (v[1] - v[0]) / 2
        w[-1] = (v[-1] - v[-2]) / 2
        w[1:-1] = (v[2:] - v[:-2]) / 2
        return w


def default_grid(kind, n: int, *, alpha: float = 1.0, density: bool = False,
                 points: int = 60) -> HyperGrid:
    """Default search set for the hyper-parameter at sample size ``n``."""
    kind = PriorKind(kind)
    logn = np.log(n)
    if kind is PriorKind.SIEVE:
        kmax = max(2, int(np.floor(0.1 * n / logn)))
        return HyperGrid(np.arange(2, kmax + 1), kind)
    if kind is PriorKind.DIRICHLET:
        kmax = max(2, int(np.floor(n / logn**2)))
        return HyperGrid(np.arange(1, kmax + 1), kind)
    if kind is PriorKind.SCALED_GAUSSIAN:
        if density:
            lo, hi = n ** (-0.25 + 1 / (8 * alpha)), n ** (alpha / 2 - 0.25)
        else:
            lo, hi = n ** (-1 / (4 * alpha)), n ** (alpha / 2)
        if not lo < hi:
            raise ParameterError(f"empty scale window [{lo}, {hi}] at n={n}, alpha={alpha}")
        return HyperGrid(np.geomspace(lo, hi, points), kind)
    if density:
        lo = 0.5 + n ** (-0.25)
        hi = logn / (16 * np.log(logn))
        if hi <= lo:
            # the asymptotic cap is below 1/2 at any practical n
            hi = logn
        return HyperGrid(np.linspace(lo, hi, points), kind)
    return HyperGrid(np.linspace(0.05, logn, points + 1)[1:], kind)


def gaussian_sds(alpha: float, tau: float, m: int) -> np.ndarray:
    """Coordinate standard deviations ``tau j^{-alpha-1/2}``, j = 1..m."""
    return tau * np.arange(1, m + 1, dtype=float) ** (-alpha - 0.5)


def prior_sds(spec: PriorSpec, lam=None, length: int | None = None) -> np.ndarray:
    """Standard deviations of the Gaussian coordinates (zeros past the support)."""
    spec = (spec if lam is None else spec.at(lam)).validate()
    if spec.kind is PriorKind.SIEVE:
        if spec.g is not CoordDensity.GAUSSIAN:
            raise ParameterError("Laplace sieve coordinates are not Gaussian")
        m = max(spec.k, length or 0, spec.trunc or 0)
        sd = np.zeros(m)
        sd[: spec.k] = 1.0
        return sd
    if spec.kind in GAUSSIAN_KINDS:
        sd = gaussian_sds(spec.alpha, spec.tau, spec.trunc)
        return sd if length is None or length <= sd.size else np.pad(sd, (0, length - sd.size))
    raise ParameterError("Dirichlet priors have no Gaussian coordinates")


def prior_draws(spec: PriorSpec, lam, draws: int, rng) -> np.ndarray:
    """``draws`` independent prior samples as rows of a 2-D array."""
    rng = np.random.default_rng(rng)
    spec = spec.at(lam).validate()
    if spec.kind is PriorKind.DIRICHLET:
        return rng.dirichlet(np.full(spec.k, spec.alpha), size=draws)
    if spec.kind is PriorKind.SIEVE:
        m = max(spec.k, spec.trunc or 0)
        out = np.zeros((draws, m))
        if spec.g is CoordDensity.GAUSSIAN:
            out[:, : spec.k] = rng.standard_normal((draws, spec.k))
        else:
            out[:, : spec.k] = rng.laplace(size=(draws, spec.k))
        return out
    return rng.standard_normal((draws, spec.trunc)) * gaussian_sds(spec.alpha, spec.tau, spec.trunc)


def sample_prior(spec: PriorSpec, lam, seed) -> CoefficientVector:
    return CoefficientVector(prior_draws(spec, lam, 1, seed)[0])


def rescale_tau(theta, tau: float, tau_new: float):
    """Push a draw from the scale-``tau`` prior onto the scale-``tau_new`` prior."""
    if not (tau > 0 and tau_new > 0):
        raise ParameterError("scales must be positive")
    arr = np.asarray(theta, dtype=float)
    return (tau_new / tau) * arr


def rescale_alpha(theta, alpha: float, alpha_new: float):
    """Push a draw from regularity ``alpha`` onto regularity ``alpha_new``.

    Works on a single vector or on rows of a 2-D array.
    """
    if not (alpha > 0 and alpha_new > 0):
        raise ParameterError("regularities must be positive")
    arr = np.asarray(theta, dtype=float)
    i = np.arange(1, arr.shape[-1] + 1, dtype=float)
    return i ** (alpha - alpha_new) * arr


def rkhs_norm(theta, alpha: float, tau: float, trunc: int | None = None) -> float:
    """Squared RKHS norm ``tau^{-2} sum_i i^{2 alpha + 1} theta_i^2``.

    Infinite when ``theta`` has mass beyond the truncation level.
    """
    theta = as_coeffs(theta)
    if trunc is not None and np.any(theta[trunc:] != 0):
        return float("inf")
    i = np.arange(1, theta.size + 1, dtype=float)
    return float(np.sum(i ** (2 * alpha + 1) * theta**2) / tau**2)


# --------------------------------------------------------------------------
# hyper-priors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HyperPrior:
    """Hyper-prior density on the hyper-parameter.

    ``poisson`` (``mean``) suits ``k``, ``inverse_gamma`` (``a``, ``b``) suits
    ``tau`` and ``exponential`` (``rate``) suits ``alpha``. The lower/upper
    tail conditions needed for hyper-parameter admissibility hold for these families;
    their constants are not checked at run time.
    """

    kind: str = "exponential"
    mean: float = 1.0
    a: float = 1.0
    b: float = 1.0
    rate: float = 1.0
    restrict_to_grid: bool = False

    def logpdf(self, lam, grid: HyperGrid | None = None) -> np.ndarray:
        return hyperprior_logdensity(self.kind, lam, mean=self.mean, a=self.a, b=self.b,
                                     rate=self.rate,
                                     grid=grid if self.restrict_to_grid else None)


def hyperprior_logdensity(family: str, lam, *, mean: float = 1.0, a: float = 1.0,
                          b: float = 1.0, rate: float = 1.0,
                          grid: HyperGrid | None = None):
    """Log density (or pmf) of a built-in hyper-prior; ``-inf`` off support."""
    lam_arr = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore"):
        if family == "poisson":
            integer = lam_arr == np.round(lam_arr)
            out = np.where(integer, stats.poisson.logpmf(np.round(lam_arr), mean), -np.inf)
            if grid is not None:
                out = out - logsumexp(stats.poisson.logpmf(grid.values, mean))
        elif family == "inverse_gamma":
            out = stats.invgamma.logpdf(lam_arr, a, scale=b)
        elif family == "exponential":
            out = stats.expon.logpdf(lam_arr, scale=1.0 / rate)
        else:
            raise ParameterError(f"unknown hyper-prior family {family!r}")
    return float(out) if np.ndim(out) == 0 else out


def default_hyperprior(kind) -> HyperPrior:
    kind = PriorKind(kind)
    if kind in DISCRETE_KINDS:
        return HyperPrior("poisson", mean=10.0, restrict_to_grid=True)
    if kind is PriorKind.SCALED_GAUSSIAN:
        return HyperPrior("inverse_gamma", a=1.0, b=1.0)
    return HyperPrior("exponential", rate=1.0)

