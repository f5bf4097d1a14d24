"""Static figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ParameterError  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_rate_fit(table, path, columns=("radius_eb", "radius_hb")) -> Path:
    """Log-log scatter of radii against n with per-n medians and fitted power laws."""
    from .lab import fit_rate_exponent, medians_by_n

    fig, ax = plt.subplots(figsize=(6, 4.2))
    drawn = False
    for col, colour in zip(columns, ("C0", "C1")):
        pts = [(r.n, getattr(r, col)) for r in table
               if r.status == "ok" and np.isfinite(getattr(r, col))]
        if not pts:
            continue
        n, v = np.array(pts).T
        ax.scatter(n, v, s=6, alpha=0.25, color=colour)
        ns, med = medians_by_n(table, col)
        ax.plot(ns, med, "o", color=colour, label=f"median {col}")
        try:
            fit = fit_rate_exponent(table, col)
        except ParameterError:
            fit = None
        if fit is not None:
            grid = np.geomspace(ns.min(), ns.max(), 50)
            ax.plot(grid, np.exp(fit.intercept) * grid**fit.slope, "-", color=colour,
                    label=f"slope {fit.slope:.3f} ± {fit.stderr:.3f}")
        drawn = True
    if not drawn:
        plt.close(fig)
        raise ParameterError("no finite radii to plot")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel("posterior radius")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_rate_curve(curve, path) -> Path:
    """``eps_n(lam)`` over the grid with the oracle level and the set Lambda_0."""
    fig, ax = plt.subplots(figsize=(6, 4.2))
    lam = curve.grid.values
    ax.plot(lam, curve.eps, "-o", ms=3, label="eps_n(lambda)")
    ax.axhline(curve.eps0, color="k", lw=1, label="oracle")
    ax.axhline(curve.Mn * curve.eps0, color="k", lw=1, ls="--", label="M_n x oracle")
    ax.plot(lam[curve.in_lambda0], curve.eps[curve.in_lambda0], "o", ms=5, mfc="none",
            color="C3", label="Lambda_0")
    ax.set_yscale("log")
    ax.set_xlabel("lambda")
    ax.set_ylabel("rate")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_marginal_curve(curve, path, lam_hat=None) -> Path:
    """Log marginal likelihood over the grid, MMLE marked."""
    fig, ax = plt.subplots(figsize=(6, 4.2))
    ax.plot(curve.grid.values, curve.logm, "-o", ms=3)
    if lam_hat is not None:
        ax.axvline(lam_hat, color="C3", ls="--", label=f"MMLE {lam_hat:.4g}")
        ax.legend(fontsize=8)
    ax.set_xlabel("lambda")
    ax.set_ylabel("log marginal likelihood")
    return _save(fig, path)
