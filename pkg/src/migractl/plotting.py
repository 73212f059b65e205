"""Matplotlib figures for trajectories and experiment reports (file output only)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_trajectory(traj, path):
    """Projections, controls and ``V(t)`` stacked in three panels."""
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    axes[0].plot(traj.times, traj.xi, lw=1)
    axes[0].plot(traj.times, traj.xibar, "k--", lw=1, label="mean")
    axes[0].set_ylabel("xi")
    axes[0].legend(loc="best")
    axes[1].step(traj.times, traj.controls, where="post", lw=1)
    axes[1].set_ylabel("alpha")
    axes[2].semilogy(traj.times, np.maximum(traj.values, 1e-300))
    axes[2].set_ylabel("V")
    axes[2].set_xlabel("t")
    return _save(fig, path)


def plot_table(reports, path, kind="table1"):
    """Heatmap of a table grid, agents on columns and horizons on rows."""
    agents = sorted({r.n_agents for r in reports})
    horizons = sorted({r.horizon for r in reports})
    grid = np.full((len(horizons), len(agents)), np.nan)
    for r in reports:
        if kind == "table1":
            val = 100 * r.inactivation_fraction
        else:
            cond = r.mean_relative_improvement_inactive
            val = np.nan if cond is None else 100 * cond
        grid[horizons.index(r.horizon), agents.index(r.n_agents)] = val
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(grid, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(agents)), [str(a) for a in agents])
    ax.set_yticks(range(len(horizons)), [f"{h:g}" for h in horizons])
    ax.set_xlabel("N")
    ax.set_ylabel("T")
    for i in range(len(horizons)):
        for j in range(len(agents)):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label="percent")
    return _save(fig, path)


def plot_ratio(pairs, path):
    """Scatter of the optimal delay against the variance ratio."""
    pairs = np.asarray(pairs)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(pairs[:, 0], pairs[:, 1], s=6)
    ax.set_xscale("log")
    ax.set_xlabel("R = variance / mean^2")
    ax.set_ylabel("delta")
    return _save(fig, path)


def plot_delta_scan(deltas, values, path, best=None):
    """Final value as a function of the delay."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(deltas, values)
    if best is not None:
        ax.axvline(best, color="r", ls="--")
    ax.set_xlabel("delta")
    ax.set_ylabel("V(T)")
    return _save(fig, path)
