"""Matplotlib rendering of experiment results to image files.

Figures accompany the CSV outputs; nothing here is interactive, and every
function writes a file and closes its figure.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_free_energy", "plot_scan", "plot_density", "plot_scatter",
           "plot_oracle_curves"]

_FIGSIZE = (6.4, 4.2)


def _new_axes(xlabel: str, ylabel: str):
    fig, ax = plt.subplots(figsize=_FIGSIZE, dpi=130)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _finish(fig, path: str) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_free_energy(stats, path: str) -> None:
    fig, ax = _new_axes("epoch", "free energy")
    epochs = np.arange(stats.n_epochs)
    f = np.asarray(stats.f_mean)
    band = np.asarray(stats.f_std)
    ax.plot(epochs, f, color="tab:blue", lw=1.2, label="ensemble mean")
    ax.fill_between(epochs, f - 2 * band, f + 2 * band, color="tab:red",
                    alpha=0.25, lw=0, label="two-standard-deviation band")
    ax.legend(loc="best")
    _finish(fig, path)


def plot_scan(scan, xs, overlay, path: str) -> None:
    fig, ax = _new_axes("final position", "trace-normalized kernel")
    ax.errorbar(scan.x, scan.k_norm, yerr=scan.err2sigma, fmt="o",
                color="tab:blue", capsize=3, ms=4, label="generator estimate")
    if overlay is not None:
        ax.plot(xs, overlay, "r--", lw=1.2, label="exact")
    ax.legend(loc="best")
    _finish(fig, path)


def plot_density(density, overlay, path: str) -> None:
    fig, ax = _new_axes("position", "ground-state density")
    ax.errorbar(density.x, density.rho, yerr=density.err2sigma, fmt="o",
                color="tab:blue", capsize=3, ms=4, label="generator estimate")
    if overlay is not None:
        ax.plot(density.x, overlay, "r--", lw=1.2, label="reference")
    ax.legend(loc="best")
    _finish(fig, path)


def plot_scatter(diag, path: str) -> None:
    fig, ax = _new_axes("shifted action", "shifted log-probability")
    order = np.argsort(diag.d)[::-1]
    sc = ax.scatter(diag.s_shift[order], diag.logq_shift[order],
                    c=diag.d[order], cmap="coolwarm", s=6, alpha=0.7)
    lim = np.percentile(diag.s_shift, 99.5)
    line = np.linspace(0.0, lim, 50)
    ax.plot(line, -line, "r-", lw=1.4, label="exact distribution")
    fig.colorbar(sc, ax=ax, label="distance to mean free energy")
    ax.legend(loc="best")
    _finish(fig, path)


def plot_oracle_curves(curves: dict, path: str) -> None:
    fig, ax = _new_axes("position", "value")
    for label, (xs, ys) in curves.items():
        ax.plot(xs, ys, lw=1.2, label=label.replace("_", " "))
    ax.legend(loc="best")
    _finish(fig, path)
