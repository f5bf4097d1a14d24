"""The rate functional ``eps_n(lam)``, oracle rates and analytic cross-checks.

``eps_n(lam)`` is the root of

    log Pi( d(theta, theta0) <= K eps | lam ) = -n eps^2

in ``eps``. The left side is a prior small-ball probability, estimated here by
Monte Carlo. Gaussian balls use exponential tilting so that deep tails stay
accurate with a few hundred draws; Dirichlet balls in the Hellinger metric use
a Dirichlet importance proposal pulled toward the truth.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaln, logsumexp

from .errors import NumericalError, ParameterError
from .models import DensityTable, TruthKind, as_coeffs, pad_to, sqrt_bin_masses
from .priors import (
    GAUSSIAN_KINDS,
    CoordDensity,
    HyperGrid,
    PriorKind,
    PriorSpec,
    prior_sds,
)

DEFAULT_K = 2.0


class SmallBallMethod(str, enum.Enum):
    MC = "mc"
    GAUSSIAN_ANALYTIC = "gaussian_analytic"


class SmallBall(NamedTuple):
    logp: float
    se: float
    flagged: bool = False
    bracket: tuple[float, float] | None = None


def _plain_se(p: float, draws: int) -> float:
    # delta-method SE of log p for a binomial proportion
    return float(np.sqrt((1 - p) / (p * (draws + 1))))


# --------------------------------------------------------------------------
# Gaussian balls: sum_j (s_j Z_j - theta0_j)^2 <= r^2
# --------------------------------------------------------------------------


class GaussianBall:
    """Small-ball probabilities of a centered Gaussian sequence around ``theta0``.

    The standard normal draws are fixed at construction, so every radius is
    evaluated with common random numbers.
    """

    def __init__(self, sds, theta0, draws: int = 256, seed=0, tilt: bool = True):
        sds = np.asarray(sds, dtype=float)
        theta0 = as_coeffs(theta0)
        m = max(sds.size, theta0.size)
        sds, theta0 = pad_to(sds, m), pad_to(theta0, m)
        active = sds > 0
        self.offset = float(theta0[~active] @ theta0[~active])
        self.mu = -theta0[active]
        self.s2 = sds[active] ** 2
        self.draws = int(draws)
        self.tilt = tilt
        self.z = np.random.default_rng(seed).standard_normal((self.draws, self.mu.size))
        self.mean_w = float(self.s2.sum() + self.mu @ self.mu)

    def _kappa(self, t):
        d = 1.0 - 2.0 * t * self.s2
        return float(np.sum(-0.5 * np.log(d) + t * self.mu**2 / d))

    def _kappa_prime(self, t):
        d = 1.0 - 2.0 * t * self.s2
        return float(np.sum(self.s2 / d + self.mu**2 / d**2))

    def tilt_for(self, w: float) -> float:
        """Tilt ``t <= 0`` putting the mean of the tilted sum at ``w``."""
        if not self.tilt or w >= self.mean_w or self.mu.size == 0:
            return 0.0
        f = lambda u: self._kappa_prime(-u) - w
        hi = 1.0 / max(self.s2.max(), 1e-300)
        while f(hi) > 0:
            hi *= 4
            if hi > 1e300:
                raise NumericalError("tilt search diverged")
        return -brentq(f, 0.0, hi, xtol=1e-14 * hi, rtol=1e-12)

    def log_prob(self, r: float) -> SmallBall:
        w = r * r - self.offset
        if w <= 0:
            return SmallBall(float("-inf"), float("inf"), True)
        if self.mu.size == 0:
            return SmallBall(0.0, 0.0)
        t = self.tilt_for(w)
        d = 1.0 - 2.0 * t * self.s2
        y = self.mu / d + np.sqrt(self.s2 / d) * self.z
        W = np.einsum("ij,ij->i", y, y)
        hit = W <= w
        hits = int(hit.sum())
        D = self.draws
        if t == 0.0:
            p = (hits + 0.5) / (D + 1)
            return SmallBall(float(np.log(p)), _plain_se(p, D), hits < 10)
        if hits == 0:
            # fall back to the smoothed plain estimate with the tilted weight scale
            return SmallBall(float(self._kappa(t) - t * w + np.log(0.5 / (D + 1))), float("inf"), True)
        logw = self._kappa(t) - t * W[hit]
        logp = logsumexp(logw) - np.log(D)
        # delta-method SE of log of the importance sampling mean
        wts = np.zeros(D)
        wts[hit] = np.exp(logw - logw.max())
        rel = wts.std(ddof=1) / np.sqrt(D) / wts.mean()
        return SmallBall(float(min(logp, 0.0)), float(rel), hits < 10)


def rkhs_projection(theta0, alpha: float, tau: float, eps: float,
                    trunc: int | None = None) -> float:
    """``min tau^{-2} sum i^{2 alpha+1} h_i^2`` over ``||h - theta0||_2 <= eps``.

    ``h`` is restricted to the first ``trunc`` coordinates when given; the
    value is infinite when that restriction makes the ball unreachable.
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    theta0 = as_coeffs(theta0)
    m = theta0.size if trunc is None else min(trunc, theta0.size)
    fixed = float(theta0[m:] @ theta0[m:])
    t = theta0[:m]
    budget = eps * eps - fixed
    if budget < 0:
        return float("inf")
    if float(t @ t) <= budget:
        return 0.0
    a = np.arange(1, m + 1, dtype=float) ** (2 * alpha + 1) / tau**2

    def gap(log_mu):
        mu = np.exp(log_mu)
        return float(np.sum((t * a / (a + mu)) ** 2)) - budget

    lo, hi = np.log(a.min()) - 10, np.log(a.max()) + 10
    while gap(hi) > 0:
        hi += 10
        if hi > 700:
            return float("inf")
    while gap(lo) < 0:
        lo -= 10
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13:
            break
    mu = np.exp(hi)
    h = t * mu / (mu + a)
    return float(np.sum(a * h * h))


def centered_small_ball(alpha: float, tau: float, u: float, trunc: int,
                        draws: int = 256, seed=0) -> SmallBall:
    """``log Pi(||theta||_2 <= u)`` for the truncated Gaussian prior."""
    sds = prior_sds(PriorSpec(PriorKind.SCALED_GAUSSIAN, alpha=alpha, tau=tau, trunc=trunc))
    return GaussianBall(sds, np.zeros(0), draws, seed).log_prob(u)


def centered_small_ball_bound(alpha: float, tau: float, u: float, c1: float = 1.0):
    """Order-of-magnitude bounds ``c1^{-1} x, c1 x`` with ``x = (u/tau)^{-1/alpha}``.

    Diagnostic only: ``c1`` is an unspecified constant.
    """
    x = (u / tau) ** (-1.0 / alpha)
    return x / c1, x * c1


def concentration_function(theta0, alpha, tau, u, trunc, draws=256, seed=0) -> float:
    """``(1/2) inf ||h||_H^2 - log Pi(||theta|| <= u)``."""
    centered = centered_small_ball(alpha, tau, u, trunc, draws, seed).logp
    return 0.5 * rkhs_projection(theta0, alpha, tau, u, trunc) - centered


# --------------------------------------------------------------------------
# Dirichlet balls in the Hellinger metric
# --------------------------------------------------------------------------


def _log_mean_sqrt_dirichlet(a: np.ndarray) -> np.ndarray:
    A = a.sum()
    return gammaln(a + 0.5) + gammaln(A) - gammaln(a) - gammaln(A + 0.5)


class HellingerBall:
    """Prior mass of ``{h(f0, f_theta) <= r}`` for the ``k``-bin Dirichlet histogram."""

    def __init__(self, f0, k: int, alpha: float = 1.0, draws: int = 256, seed=0):
        if not isinstance(f0, DensityTable) and not callable(f0):
            f0 = DensityTable(np.asarray(f0, float) / np.sum(f0) * np.size(f0), "cells")
        self.k = int(k)
        self.alpha = float(alpha)
        self.eta = sqrt_bin_masses(f0, self.k)
        self.v = self.eta * np.sqrt(self.k)
        vnorm = float(np.linalg.norm(self.v))
        self.min_h2 = max(0.0, 2.0 - 2.0 * vnorm)
        self.direction = self.v**2 / vnorm**2
        self.draws = int(draws)
        self.seed = seed

    def _expected_h2(self, c: float) -> float:
        a = self.alpha + c * self.direction
        return float(2.0 - 2.0 * self.v @ np.exp(_log_mean_sqrt_dirichlet(a)))

    def log_prob(self, r: float) -> SmallBall:
        r2 = r * r
        if r2 >= 2.0:
            return SmallBall(0.0, 0.0)
        if r2 <= self.min_h2:
            return SmallBall(float("-inf"), float("inf"), True)
        k, D = self.k, self.draws
        prior = np.full(k, self.alpha)
        c = 0.0
        if self._expected_h2(0.0) > r2:
            f = lambda logc: self._expected_h2(np.exp(logc)) - r2
            hi = 0.0
            while f(hi) > 0:
                hi += 2.0
                if hi > 200:
                    break
            if f(hi) <= 0:
                c = float(np.exp(brentq(f, -30.0, hi, xtol=1e-10)))
            else:
                c = float(np.exp(hi))
        rng = np.random.default_rng(self.seed)
        prop = prior + c * self.direction
        theta = rng.dirichlet(prop, size=D)
        h2 = 2.0 - 2.0 * np.sqrt(np.clip(theta, 0, None)) @ self.v
        hit = h2 <= r2
        hits = int(hit.sum())
        if c == 0.0:
            p = (hits + 0.5) / (D + 1)
            return SmallBall(float(np.log(p)), _plain_se(p, D), hits < 10)
        if hits == 0:
            return SmallBall(float(np.log(0.5 / (D + 1))), float("inf"), True)
        th = np.clip(theta[hit], 1e-300, None)
        logw = ((gammaln(k * self.alpha) - gammaln(self.alpha) * k
                 + (self.alpha - 1) * np.log(th).sum(axis=1))
                - (gammaln(prop.sum()) - gammaln(prop).sum()
                   + np.log(th) @ (prop - 1)))
        logp = logsumexp(logw) - np.log(D)
        wts = np.zeros(D)
        wts[hit] = np.exp(logw - logw.max())
        rel = wts.std(ddof=1) / np.sqrt(D) / wts.mean()
        return SmallBall(float(min(logp, 0.0)), float(rel), hits < 10)


class PlainBall:
    """Plain prior-sampling estimate (Laplace sieve coordinates)."""

    def __init__(self, prior: PriorSpec, lam, theta0, draws: int = 256, seed=0):
        spec = prior.at(lam).validate()
        theta0 = as_coeffs(theta0)
        rng = np.random.default_rng(seed)
        k = spec.k
        draws_ = rng.laplace(size=(draws, k)) if spec.g is CoordDensity.LAPLACE \
            else rng.standard_normal((draws, k))
        t = pad_to(theta0, max(k, theta0.size))
        diff = draws_ - t[:k]
        self.d2 = np.einsum("ij,ij->i", diff, diff) + float(t[k:] @ t[k:])
        self.draws = draws

    def log_prob(self, r: float) -> SmallBall:
        hits = int(np.sum(self.d2 <= r * r))
        D = self.draws
        p = (hits + 0.5) / (D + 1)
        return SmallBall(float(np.log(p)), _plain_se(p, D), hits < 10)


def make_ball(prior: PriorSpec, lam, theta0, *, dim: int | None = None, draws: int = 256,
              seed=0, tilt: bool = True, metric: str = "l2"):
    """Small-ball evaluator ``r -> log Pi(d(theta, theta0) <= r | lam)``.

    ``dim`` is the truncation used for the Gaussian families when the prior
    spec does not carry one. For Dirichlet priors ``theta0`` is the truth's bin
    masses (or a density table) and the metric is Hellinger.
    """
    spec = prior.at(lam)
    if spec.kind is PriorKind.DIRICHLET:
        if metric != "hellinger":
            raise ParameterError("Dirichlet balls are measured in the Hellinger metric")
        return HellingerBall(theta0, spec.k, spec.alpha, draws, seed)
    if metric != "l2":
        raise ParameterError("coefficient priors measure balls in l2")
    if spec.kind is PriorKind.SIEVE and spec.g is CoordDensity.LAPLACE:
        return PlainBall(prior, lam, theta0, draws, seed)
    if spec.kind in GAUSSIAN_KINDS and spec.trunc is None:
        if dim is None:
            raise ParameterError("Gaussian priors need a truncation level")
        spec = PriorSpec(spec.kind, alpha=spec.alpha, tau=spec.tau, trunc=int(dim))
    return GaussianBall(prior_sds(spec), theta0, draws, seed, tilt)


def small_ball_log_prob(prior: PriorSpec, lam, theta0, eps: float, K: float = DEFAULT_K,
                        method=SmallBallMethod.MC, draws: int = 256, seed=0,
                        dim: int | None = None, metric: str = "l2") -> SmallBall:
    """``log Pi(d(theta, theta0) <= K eps | lam)``.

    ``method="mc"`` returns the Monte Carlo estimate. ``"gaussian_analytic"``
    (Gaussian families only) returns the midpoint of
    ``[-phi(K eps / 2), -phi(K eps)]`` with that bracket attached, where ``phi``
    is the concentration function.
    """
    if eps <= 0 or K <= 0:
        raise ParameterError("eps and K must be positive")
    method = SmallBallMethod(method)
    if method is SmallBallMethod.MC:
        return make_ball(prior, lam, theta0, dim=dim, draws=draws, seed=seed,
                         metric=metric).log_prob(K * eps)
    spec = prior.at(lam)
    if spec.kind not in GAUSSIAN_KINDS:
        raise ParameterError("the analytic sandwich needs a Gaussian prior")
    trunc = spec.trunc or dim
    if trunc is None:
        raise ParameterError("Gaussian priors need a truncation level")
    sds = prior_sds(PriorSpec(PriorKind.SCALED_GAUSSIAN, alpha=spec.alpha, tau=spec.tau, trunc=trunc))
    centered = GaussianBall(sds, np.zeros(0), draws, seed)
    phi = lambda u: (0.5 * rkhs_projection(theta0, spec.alpha, spec.tau, u, trunc)
                     - centered.log_prob(u).logp)
    hi, lo = -phi(K * eps), -phi(K * eps / 2)
    mid = 0.5 * (lo + hi) if np.isfinite(lo) else hi
    return SmallBall(float(mid), float("nan"), not np.isfinite(lo), (float(lo), float(hi)))


# --------------------------------------------------------------------------
# the rate equation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RateSolution:
    eps: float
    lo: float
    hi: float
    c0: float
    flagged: bool
    evaluations: int
    initial_bracket: tuple[float, float]


def solve_rate(S: Callable[[float], float], n: float, *, rtol: float = 1e-3, start=None,
               lower: float = 1e-12, upper: float = 1e6,
               flag: Callable[[float], bool] | None = None) -> RateSolution:
    """Root of ``S(eps) + n eps^2`` by bracketing and bisection.

    ``S`` must be nondecreasing. ``c0`` is the achieved factor
    ``-S(eps) / (n eps^2)`` at the returned point.
    """
    if n <= 0:
        raise ParameterError("n must be positive")
    g = lambda e: S(e) + n * e * e
    x = 1.0 / np.sqrt(n) if start is None else float(start)
    evals = 1
    gx = g(x)
    if np.isnan(gx):
        raise NumericalError(f"rate equation is NaN at eps={x}")
    if gx > 0:
        hi, lo = x, x / 2
        while g(lo) > 0:
            evals += 1
            hi, lo = lo, lo / 2
            if lo < lower:
                raise NumericalError(f"no sign change above eps={lower}: S({lo})={S(lo)}")
        evals += 1
    else:
        lo, hi = x, 2 * x
        while g(hi) <= 0:
            evals += 1
            lo, hi = hi, 2 * hi
            if hi > upper:
                raise NumericalError(f"no sign change below eps={upper}: S({hi})={S(hi)}")
        evals += 1
    initial = (lo, hi)
    while hi - lo > rtol * lo:
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        evals += 1
        if np.isnan(gm):
            raise NumericalError(f"rate equation is NaN at eps={mid}")
        if gm > 0:
            hi = mid
        else:
            lo = mid
    eps = 0.5 * (lo + hi)
    s = S(eps)
    c0 = float(-s / (n * eps * eps)) if np.isfinite(s) else float("inf")
    return RateSolution(eps, lo, hi, c0, bool(flag(eps)) if flag else False, evals, initial)


def epsilon_n(prior: PriorSpec, lam, theta0, n: int, K: float = DEFAULT_K, *,
              method=SmallBallMethod.MC, draws: int = 256, seed=0, rtol: float = 1e-3,
              dim: int | None = None, metric: str = "l2") -> RateSolution:
    """Solve the rate equation for ``eps_n(lam)``.

    Gaussian truncations default to ``n`` coordinates.
    """
    method = SmallBallMethod(method)
    dim = n if dim is None else dim
    if method is SmallBallMethod.MC:
        ball = make_ball(prior, lam, theta0, dim=dim, draws=draws, seed=seed, metric=metric)
        S = lambda e: ball.log_prob(K * e).logp
        flag = lambda e: ball.log_prob(K * e).flagged
    else:
        S = lambda e: small_ball_log_prob(prior, lam, theta0, e, K, method, draws, seed, dim).logp
        flag = None
    return solve_rate(S, n, rtol=rtol, flag=flag)


def oracle_rate(eps, n: int, Mn: float | None = None, mn: float | None = None):
    """Oracle rate and membership of ``Lambda_0``.

    Returns ``(eps0, in_lambda0, fallback)``; ``fallback`` is true when no
    grid point clears the floor ``mn log n / n`` and ``eps0`` is the floor.
    """
    eps = np.asarray(eps, dtype=float)
    if eps.size == 0:
        raise ParameterError("empty rate curve")
    loglog = np.log(np.log(n)) if n > np.e else 1.0
    Mn = loglog if Mn is None else Mn
    mn = loglog if mn is None else mn
    floor2 = mn * np.log(n) / n
    admissible = eps**2 >= floor2
    fallback = not admissible.any()
    eps0 = float(np.sqrt(floor2)) if fallback else float(max(eps[admissible].min(), np.sqrt(floor2)))
    return eps0, eps <= Mn * eps0, fallback


@dataclass(frozen=True, eq=False)
class RateCurve:
    grid: HyperGrid
    eps: np.ndarray
    eps0: float
    in_lambda0: np.ndarray
    K: float
    Mn: float
    mn: float
    n: int
    flagged: np.ndarray | None = None
    fallback: bool = False

    def __post_init__(self):
        if np.any(~(self.eps > 0)):
            raise ParameterError("rates must be positive")

    def at(self, lam) -> tuple[float, bool]:
        i = int(np.flatnonzero(self.grid.values == lam)[0])
        return float(self.eps[i]), bool(self.in_lambda0[i])


def rate_curve(prior: PriorSpec, grid: HyperGrid, theta0, n: int, K: float = DEFAULT_K, *,
               Mn: float | None = None, mn: float | None = None, draws: int = 256, seed=0,
               rtol: float = 1e-3, dim: int | None = None, metric: str = "l2",
               method=SmallBallMethod.MC) -> RateCurve:
    """``eps_n(lam)`` over a grid, with the oracle rate and ``Lambda_0``.

    Randomness at grid point ``i`` derives from ``(seed, i)``.
    """
    if grid.family is not prior.kind:
        raise ParameterError("grid family does not match the prior")
    eps = np.empty(len(grid))
    flagged = np.zeros(len(grid), dtype=bool)
    for i, lam in enumerate(grid.values):
        sol = epsilon_n(prior, lam, theta0, n, K, method=method, draws=draws,
                        seed=np.random.SeedSequence([int(seed), i]), rtol=rtol, dim=dim,
                        metric=metric)
        eps[i], flagged[i] = sol.eps, sol.flagged
    loglog = np.log(np.log(n)) if n > np.e else 1.0
    Mn = loglog if Mn is None else Mn
    mn = loglog if mn is None else mn
    eps0, member, fallback = oracle_rate(eps, n, Mn, mn)
    return RateCurve(grid, eps, eps0, member, K, Mn, mn, n, flagged, fallback)


# --------------------------------------------------------------------------
# analytic formulas
# --------------------------------------------------------------------------


def analytic_rate_T1(k: int, theta0, n: int) -> float:
    """Representative rate of the sieve prior: tail energy plus ``k log n / n``."""
    if k < 1:
        raise ParameterError("k must be positive")
    t = as_coeffs(theta0)
    return float(np.sqrt(t[int(k):] @ t[int(k):] + k * np.log(n) / n))


def analytic_rate_gaussian(alpha: float, tau: float, beta: float, L: float, n: int,
                           kind=TruthKind.HYPERRECT, theta0_norm: float = 0.0):
    """Lower and upper representatives of ``eps_n(alpha, tau)`` for Gaussian priors."""
    if min(alpha, tau, beta, L) <= 0:
        raise ParameterError("alpha, tau, beta and L must be positive")
    kind = TruthKind(kind)
    nt2 = n * tau**2
    base = n ** (-alpha / (2 * alpha + 1)) * tau ** (1 / (2 * alpha + 1))
    lower = base + (theta0_norm / np.sqrt(nt2) if nt2 > 1 else 0.0)
    if np.isclose(beta, alpha + 0.5):
        if kind is TruthKind.SOBOLEV:
            bias = (L ** ((alpha + 0.5) / beta) / nt2) ** 0.5
        else:
            bias = np.sqrt(np.log(nt2) / nt2) if nt2 > 1 else 0.0
    else:
        a = L ** ((alpha + 0.5) / beta)
        if kind is TruthKind.HYPERRECT:
            a /= abs(2 * alpha - 2 * beta + 1)
        bias = (a / nt2) ** min(beta / (2 * alpha + 1), 0.5)
    return float(lower), float(base + bias)


class Exponent(NamedTuple):
    value: float
    log_factor: bool


def theoretical_exponent(family, alpha: float, beta: float,
                         kind=TruthKind.HYPERRECT) -> Exponent:
    """Exponent ``gamma`` of the oracle rate ``n^{-gamma}`` (up to log factors)."""
    if alpha <= 0 or beta <= 0:
        raise ParameterError("alpha and beta must be positive")
    family = PriorKind(family)
    minimax = beta / (2 * beta + 1)
    if family is PriorKind.SIEVE:
        return Exponent(minimax, True)
    if family is PriorKind.SCALED_GAUSSIAN:
        if np.isclose(beta, alpha + 0.5):
            return Exponent(minimax, TruthKind(kind) is TruthKind.HYPERRECT)
        if beta > alpha + 0.5:
            return Exponent((2 * alpha + 1) / (4 * alpha + 4), False)
        return Exponent(minimax, False)
    if family is PriorKind.DIRICHLET:
        return Exponent(min(beta, 1.0) / (2 * min(beta, 1.0) + 1), True)
    return Exponent(minimax, False)


def _refined_cells(f0, k: int, per_bin: int = 4096) -> np.ndarray:
    """``sqrt(f0)`` on equal cells whose edges include the ``k`` bin edges."""
    if isinstance(f0, DensityTable) and f0.layout == "cells":
        m = f0.values.size
        lcm = m * k // np.gcd(m, k)
        return np.repeat(np.sqrt(f0.values), lcm // m)
    x = (np.arange(k * per_bin) + 0.5) / (k * per_bin)
    vals = np.asarray(f0(x), dtype=float)
    if np.any(vals < 0):
        raise ParameterError("density must be nonnegative")
    return np.sqrt(vals)


def histogram_bias(f0, k: int, per_bin: int = 4096) -> float:
    """``b(k)``: Hellinger distance from ``f0`` to its best ``k``-bin histogram.

    Cells tables are handled exactly; other densities use a midpoint rule with
    ``per_bin`` points in each bin.
    """
    if k < 1:
        raise ParameterError("k must be positive")
    root = _refined_cells(f0, int(k), per_bin).reshape(int(k), -1)
    dev = root - root.mean(axis=1, keepdims=True)
    return float(np.sqrt(np.mean(dev * dev)))


def analytic_rate_histogram(f0, k: int, n: int) -> tuple[float, float]:
    """Lower and upper representatives of ``eps_n(k)`` for the Dirichlet histogram."""
    b2 = histogram_bias(f0, k) ** 2
    return float(np.sqrt(b2 + k * np.log(n / k) / n)), float(np.sqrt(b2 + k * np.log(n) / n))
