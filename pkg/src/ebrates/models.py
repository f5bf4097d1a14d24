"""Observation models, truths, simulation and divergences.

Three models share a coefficient-sequence parameterization:

* white noise, ``X_j = theta_j + n^{-1/2} Z_j`` for ``j = 1..n``;
* fixed-design regression ``x_i = f(i/n) + sigma Z_i`` with ``f`` expanded in
  the real Fourier basis ``e_1 = 1, e_{2m} = sqrt2 cos(2 pi m t),
  e_{2m+1} = sqrt2 sin(2 pi m t)``;
* i.i.d. density estimation on ``[0, 1]``, either log-linear
  ``f = exp(sum_j theta_j phi_j - c(theta))`` with ``phi_j = sqrt2 cos(pi j x)``
  or a ``k``-bin histogram ``f = k sum_j theta_j 1_{I_j}``.

Densities are tabulated as :class:`DensityTable`: either values at the nodes
of a uniform grid (integrated with composite Simpson) or values on uniform
cells (piecewise constant, integrated exactly).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from math import gcd
from typing import Callable

import numpy as np
from scipy.integrate import simpson

from .errors import ParameterError

QUAD_POINTS = 4097
SAMPLING_GRID = 4096
DENSITY_TRUTH_DIM = 64


class TruthKind(str, enum.Enum):
    HYPERRECT = "hyperrect"
    SOBOLEV = "sobolev"
    CUSTOM = "custom"


class ModelKind(str, enum.Enum):
    WHITE_NOISE = "white_noise"
    REGRESSION = "regression"
    DENSITY = "density"


class DensityParam(str, enum.Enum):
    LOGLINEAR = "loglinear"
    HISTOGRAM = "histogram"


def as_coeffs(theta) -> np.ndarray:
    """Return ``theta`` as a finite 1-D float array."""
    arr = np.atleast_1d(np.asarray(theta, dtype=float))
    if arr.ndim != 1:
        raise ParameterError("coefficient vector must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("coefficient vector has non-finite entries")
    return arr


def as_seed_sequence(seed) -> np.random.SeedSequence:
    """Accept an int, a sequence of ints or a ``SeedSequence``."""
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def pad_to(a: np.ndarray, length: int) -> np.ndarray:
    if a.shape[-1] >= length:
        return a
    pad = [(0, 0)] * (a.ndim - 1) + [(0, length - a.shape[-1])]
    return np.pad(a, pad)


@dataclass(frozen=True, eq=False)
class CoefficientVector:
    """Finite vector of basis coefficients; entries past ``length`` are zero."""

    coeffs: np.ndarray

    def __post_init__(self):
        arr = as_coeffs(self.coeffs).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "coeffs", arr)

    @property
    def length(self) -> int:
        return self.coeffs.size

    def __len__(self):
        return self.coeffs.size

    def __array__(self, dtype=None, copy=None):
        return self.coeffs if dtype is None else self.coeffs.astype(dtype)

    def __getitem__(self, item):
        return self.coeffs[item]

    def norm1(self) -> float:
        return float(np.abs(self.coeffs).sum())

    def norm2(self) -> float:
        return float(np.sqrt(np.sum(self.coeffs**2)))


@dataclass(frozen=True)
class TruthSpec:
    kind: TruthKind = TruthKind.HYPERRECT
    beta: float = 1.0
    L: float = 1.0
    dim: int | None = None
    seed: int = 0
    coeffs: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TruthKind(self.kind))


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind = ModelKind.WHITE_NOISE
    n: int = 100
    sigma: float = 1.0
    density_param: DensityParam = DensityParam.LOGLINEAR

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        object.__setattr__(self, "density_param", DensityParam(self.density_param))
        if int(self.n) != self.n or self.n < 1:
            raise ParameterError(f"sample size must be a positive integer, got {self.n}")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ParameterError(f"sigma must be finite and positive, got {self.sigma}")

    def with_n(self, n: int) -> "ModelSpec":
        return ModelSpec(self.kind, int(n), self.sigma, self.density_param)


@dataclass(frozen=True, eq=False)
class Dataset:
    model: ModelSpec
    obs: np.ndarray
    truth: CoefficientVector
    seed: int

    def __post_init__(self):
        obs = np.asarray(self.obs, dtype=float)
        if obs.shape != (self.model.n,):
            raise ParameterError("observation length must equal n")
        if self.model.kind is ModelKind.DENSITY and (obs.min() < 0 or obs.max() > 1):
            raise ParameterError("density samples must lie in [0, 1]")
        obs.setflags(write=False)
        object.__setattr__(self, "obs", obs)


@dataclass(frozen=True, eq=False)
class DensityTable:
    """A density on [0, 1].

    ``layout="nodes"``: values at ``len(values)`` equispaced nodes including
    both endpoints. ``layout="cells"``: constant values on ``len(values)``
    equal cells.
    """

    values: np.ndarray
    layout: str = "nodes"
    log_norm: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if self.layout not in ("nodes", "cells"):
            raise ParameterError(f"unknown table layout {self.layout!r}")
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or vals.size < (3 if self.layout == "nodes" else 1):
            raise ParameterError("density table too small")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ParameterError("density table must be finite and nonnegative")
        object.__setattr__(self, "values", vals)

    @property
    def grid(self) -> np.ndarray:
        if self.layout == "nodes":
            return np.linspace(0.0, 1.0, self.values.size)
        m = self.values.size
        return (np.arange(m) + 0.5) / m

    def integral(self) -> float:
        if self.layout == "cells":
            return float(self.values.mean())
        return float(simpson(self.values, x=self.grid))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.layout == "nodes":
            return np.interp(x, self.grid, self.values)
        m = self.values.size
        idx = np.clip(np.ceil(x * m).astype(int) - 1, 0, m - 1)
        return self.values[idx]


# --------------------------------------------------------------------------
# truths
# --------------------------------------------------------------------------


def generate_truth(spec: TruthSpec, dim: int | None = None) -> CoefficientVector:
    """Build a truncated true coefficient sequence.

    ``HYPERRECT`` is the boundary element ``theta_i = sqrt(L) (1+i)^{-beta-1/2}``
    of the hyper-rectangle; ``SOBOLEV`` draws Gaussian coefficients decaying
    like ``i^{-beta-1}`` and rescales them onto ``sum i^{2 beta} theta_i^2 <= L``.
    """
    if spec.kind is TruthKind.CUSTOM:
        if spec.coeffs is None:
            raise ParameterError("custom truth needs coeffs")
        return CoefficientVector(np.asarray(spec.coeffs, dtype=float))
    dim = spec.dim if dim is None else dim
    if dim is None or dim < 1:
        raise ParameterError(f"truth dimension must be >= 1, got {dim}")
    if not (spec.beta > 0 and spec.L > 0):
        raise ParameterError("beta and L must be positive")
    i = np.arange(1, dim + 1, dtype=float)
    if spec.kind is TruthKind.HYPERRECT:
        return CoefficientVector(np.sqrt(spec.L) * (1.0 + i) ** (-spec.beta - 0.5))
    rng = np.random.default_rng(spec.seed)
    theta = rng.standard_normal(dim) * i ** (-spec.beta - 1.0)
    energy = np.sum(i ** (2 * spec.beta) * theta**2)
    theta *= np.sqrt(spec.L / energy)
    # guard against round-up past the ball
    while np.sum(i ** (2 * spec.beta) * theta**2) > spec.L:
        theta *= 1 - 1e-12
    return CoefficientVector(theta)


# --------------------------------------------------------------------------
# bases
# --------------------------------------------------------------------------


def fourier_basis(t, J: int) -> np.ndarray:
    """Real Fourier basis e_1..e_J evaluated at points ``t`` (shape len(t) x J)."""
    t = np.asarray(t, dtype=float)
    j = np.arange(1, J + 1)
    freq = (j // 2).astype(float)
    out = np.empty((t.size, J))
    out[:, 0] = 1.0
    arg = 2 * np.pi * np.outer(t, freq[1:])
    even = (j[1:] % 2) == 0
    out[:, 1:][:, even] = np.sqrt(2) * np.cos(arg[:, even])
    out[:, 1:][:, ~even] = np.sqrt(2) * np.sin(arg[:, ~even])
    return out


def fourier_design(n: int, J: int) -> np.ndarray:
    """Design matrix with entries ``e_j(i/n)``, i = 1..n, j = 1..J."""
    if J > n:
        raise ParameterError(f"J={J} exceeds n={n}")
    if J < 1:
        raise ParameterError("J must be positive")
    return fourier_basis(np.arange(1, n + 1) / n, J)


@lru_cache(maxsize=32)
def _cosine_basis(k: int, grid_size: int) -> np.ndarray:
    x = np.linspace(0.0, 1.0, grid_size)
    phi = np.sqrt(2) * np.cos(np.pi * np.outer(np.arange(1, k + 1), x))
    phi.setflags(write=False)
    return phi


def cosine_basis(k: int, x) -> np.ndarray:
    """phi_1..phi_k at points ``x``; shape (k, len(x))."""
    x = np.asarray(x, dtype=float)
    return np.sqrt(2) * np.cos(np.pi * np.outer(np.arange(1, k + 1), x))


def sequence_form(data: Dataset) -> tuple[np.ndarray, np.ndarray, float]:
    """Reduce a Gaussian dataset to independent coordinates.

    Returns ``(y, v, logjac)`` with ``y_j ~ N(theta_j, v_j)`` independently and
    ``logjac`` the constant that turns the product of coordinate densities into
    the density of the raw observations.
    """
    model = data.model
    n = model.n
    if model.kind is ModelKind.WHITE_NOISE:
        return np.array(data.obs), np.full(n, 1.0 / n), 0.0
    if model.kind is ModelKind.REGRESSION:
        E = fourier_design(n, n)
        gram = np.einsum("ij,ij->j", E, E) / n
        y = E.T @ data.obs / (n * gram)
        v = model.sigma**2 / (n * gram)
        return y, v, -0.5 * float(np.sum(np.log(n * gram)))
    raise ParameterError("sequence form only exists for white noise and regression")


# --------------------------------------------------------------------------
# densities
# --------------------------------------------------------------------------


def _log_norm(s: np.ndarray, x: np.ndarray) -> np.ndarray:
    smax = s.max(axis=-1, keepdims=True)
    return smax[..., 0] + np.log(simpson(np.exp(s - smax), x=x, axis=-1))


def loglinear_density(theta, grid_size: int = QUAD_POINTS) -> DensityTable:
    """Tabulate ``f_theta`` on ``grid_size`` nodes; ``log_norm`` holds c(theta)."""
    theta = as_coeffs(theta)
    if grid_size % 2 == 0:
        raise ParameterError("Simpson grids need an odd number of nodes")
    x = np.linspace(0.0, 1.0, grid_size)
    s = theta @ _cosine_basis(theta.size, grid_size)
    c = float(_log_norm(s, x))
    return DensityTable(np.exp(s - c), "nodes", log_norm=c)


def loglinear_log_norm(thetas: np.ndarray, grid_size: int = QUAD_POINTS) -> np.ndarray:
    """c(theta) for each row of ``thetas`` (vectorized)."""
    thetas = np.atleast_2d(thetas)
    x = np.linspace(0.0, 1.0, grid_size)
    return _log_norm(thetas @ _cosine_basis(thetas.shape[1], grid_size), x)


def loglinear_loglik(thetas: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """Log-likelihood of i.i.d. ``samples`` under each row of ``thetas``."""
    thetas = np.atleast_2d(thetas)
    stats = cosine_basis(thetas.shape[1], samples).sum(axis=1)
    return thetas @ stats - samples.size * loglinear_log_norm(thetas)


def check_simplex(theta, tol: float = 1e-9) -> np.ndarray:
    theta = as_coeffs(theta)
    if np.any(theta < -tol) or abs(theta.sum() - 1.0) > tol:
        raise ParameterError("weights must be nonnegative and sum to one")
    return np.clip(theta, 0.0, None)


def histogram_density(theta, k: int | None = None) -> DensityTable:
    """Piecewise-constant density ``k sum_j theta_j 1((j-1)/k, j/k]``."""
    theta = check_simplex(theta)
    if k is not None and theta.size != k:
        raise ParameterError(f"expected {k} weights, got {theta.size}")
    return DensityTable(theta * theta.size, "cells")


def histogram_truth(theta0, bins: int = SAMPLING_GRID) -> np.ndarray:
    """Bin masses of the log-linear density ``f_theta0`` on ``bins`` equal cells."""
    table = loglinear_density(theta0, grid_size=2 * bins + 1)
    f = table.values
    # Simpson on each cell [2b, 2b+2] of the doubled grid
    h = 1.0 / (2 * bins)
    mass = h / 3 * (f[:-1:2] + 4 * f[1::2] + f[2::2])
    return mass / mass.sum()


def hellinger(f: DensityTable, g: DensityTable) -> float:
    """Hellinger distance ``(int (sqrt f - sqrt g)^2)^{1/2}``."""
    if f.layout != g.layout:
        raise ParameterError("density tables use different layouts")
    if f.layout == "nodes":
        if f.values.size != g.values.size:
            raise ParameterError("density tables live on different grids")
        h2 = simpson((np.sqrt(f.values) - np.sqrt(g.values)) ** 2, x=f.grid)
    else:
        a, b = f.values.size, g.values.size
        m = a * b // gcd(a, b)
        fv, gv = np.repeat(f.values, m // a), np.repeat(g.values, m // b)
        h2 = np.mean((np.sqrt(fv) - np.sqrt(gv)) ** 2)
    return float(np.sqrt(min(max(h2, 0.0), 2.0)))


def sqrt_bin_masses(f0, k: int) -> np.ndarray:
    """``int_{I_j} sqrt(f0)`` over the ``k`` equal bins.

    ``f0`` may be a cells table (exact), a nodes table or a callable (adaptive
    quadrature per bin).
    """
    edges = np.arange(k + 1) / k
    if isinstance(f0, DensityTable) and f0.layout == "cells":
        m = f0.values.size
        cum = np.concatenate([[0.0], np.cumsum(np.sqrt(f0.values)) / m])
        return np.diff(np.interp(edges, np.arange(m + 1) / m, cum))
    from scipy.integrate import quad

    func: Callable = f0
    return np.array(
        [quad(lambda x: np.sqrt(func(x)), a, b, limit=200, epsabs=1e-14, epsrel=1e-12)[0]
         for a, b in zip(edges[:-1], edges[1:])]
    )


# --------------------------------------------------------------------------
# simulation
# --------------------------------------------------------------------------


def simulate(model: ModelSpec, theta0, seed: int) -> Dataset:
    """Draw one dataset from ``model`` at truth ``theta0``.

    For the histogram parameterization ``theta0`` is a vector of bin masses
    (any number of bins); for the log-linear one it holds cosine coefficients.
    """
    theta0 = CoefficientVector(theta0)
    rng = np.random.default_rng(seed)
    n = model.n
    if model.kind is ModelKind.WHITE_NOISE:
        obs = pad_to(theta0.coeffs[:n], n) + rng.standard_normal(n) / np.sqrt(n)
    elif model.kind is ModelKind.REGRESSION:
        t = np.arange(1, n + 1) / n
        obs = fourier_basis(t, theta0.length) @ theta0.coeffs + model.sigma * rng.standard_normal(n)
    elif model.density_param is DensityParam.HISTOGRAM:
        w = check_simplex(theta0.coeffs)
        m = w.size
        bins = rng.choice(m, size=n, p=w / w.sum())
        obs = (bins + 1.0 - rng.random(n)) / m
    else:
        if theta0.norm1() > 50:
            raise ParameterError("log-linear truth has too large an l1 norm")
        table = loglinear_density(theta0.coeffs, grid_size=SAMPLING_GRID + 1)
        x = table.grid
        f = table.values
        cdf = np.concatenate([[0.0], np.cumsum((f[1:] + f[:-1]) / 2) / SAMPLING_GRID])
        cdf /= cdf[-1]
        obs = np.interp(rng.random(n), cdf, x)
    return Dataset(model, np.clip(obs, 0.0, 1.0) if model.kind is ModelKind.DENSITY else obs,
                   theta0, seed)


# --------------------------------------------------------------------------
# divergences
# --------------------------------------------------------------------------


def divergences(model: ModelSpec, theta0, theta) -> tuple[float, float]:
    """Kullback-Leibler divergence and centered second moment of the log-likelihood
    ratio between the n-sample laws at ``theta0`` and ``theta``."""
    t0, t1 = as_coeffs(theta0), as_coeffs(theta)
    m = max(t0.size, t1.size)
    diff = pad_to(t1, m) - pad_to(t0, m)
    n = model.n
    if model.kind is ModelKind.WHITE_NOISE:
        d2 = float(diff @ diff)
        return n * d2 / 2, n * d2
    if model.kind is ModelKind.REGRESSION:
        d2 = float(diff @ diff) / model.sigma**2
        return n * d2 / 2, n * d2
    if model.density_param is DensityParam.HISTOGRAM:
        p, q = check_simplex(t0), check_simplex(t1)
        if p.size != q.size:
            raise ParameterError("histograms must have the same number of bins")
        pos = p > 0
        if np.any(q[pos] == 0):
            return float("inf"), float("inf")
        llr = np.log(p[pos] / q[pos])
        kl = float(p[pos] @ llr)
        return n * kl, n * float(p[pos] @ (llr - kl) ** 2)
    x = np.linspace(0.0, 1.0, QUAD_POINTS)
    phi = _cosine_basis(m, QUAD_POINTS)
    c0, c1 = loglinear_log_norm(np.vstack([pad_to(t0, m), pad_to(t1, m)]))
    f0 = np.exp(pad_to(t0, m) @ phi - c0)
    llr = -diff @ phi - c0 + c1
    kl = float(simpson(f0 * llr, x=x))
    v2 = float(simpson(f0 * (llr - kl) ** 2, x=x))
    return n * kl, n * v2
