"""Static SVG figures for study reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_SVG_META = {"Date": None, "Creator": "tpmsfem"}
plt.rcParams["svg.hashsalt"] = "tpmsfem"


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_convergence(series, path, asymptotes=None, ylabel="E_eff (MPa)", log_x=False):
    """Result against element size, one line per series.

    Parameters
    ----------
    series : dict
        ``label -> (h values, f values)``.
    asymptotes : dict, optional
        ``label -> extrapolated value`` drawn as dashed horizontal lines.
    """
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    for i, (label, (h, f)) in enumerate(series.items()):
        color = f"C{i}"
        ax.plot(h, f, "o-", color=color, label=label)
        if asymptotes and label in asymptotes:
            ax.axhline(asymptotes[label], color=color, ls="--", lw=0.8, label=f"{label} (h -> 0)")
    if log_x:
        ax.set_xscale("log")
    ax.invert_xaxis()
    ax.set_xlabel("element size h (mm)")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_mj_sweep(mj, f, path, ylabel="E_eff (MPa)"):
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    order = np.argsort(mj)[::-1]
    ax.plot(np.asarray(mj)[order], np.asarray(f)[order], "s-")
    ax.invert_xaxis()
    ax.set_xlabel("minimum Jacobian MJ")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_gibson_ashby(rd, e_rel, fit, path):
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.loglog(rd, e_rel, "o", label="simulation")
    grid = np.geomspace(min(rd) * 0.9, max(rd) * 1.1, 50)
    ax.loglog(grid, fit.predict(grid), "-",
              label=f"{fit.C1:.3g} RD^{fit.m:.3g}  (R2 = {fit.r2:.4f})")
    ax.set_xlabel("relative density")
    ax.set_ylabel("E / E_s")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8)
    return _save(fig, path)
