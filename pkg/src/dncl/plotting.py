"""Figure rendering for CLI reports.

Figures are drawn on bare :class:`matplotlib.figure.Figure` objects (no
pyplot state) and saved without a software-version stamp, so re-running a
report rewrites the same PNG bytes.
"""

from __future__ import annotations

import numpy as np
from matplotlib.figure import Figure

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figure(w: float, h: float) -> Figure:
    fig = Figure(figsize=(w, h), dpi=110, layout="constrained")
    return fig


def save(fig: Figure, path) -> None:
    fig.savefig(path, metadata={"Software": None})


def _styled(fn):
    def wrapper(*args, **kwargs):
        import matplotlib

        with matplotlib.rc_context(RC):
            return fn(*args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_styled
def plot_dynamics(trajectories: dict, target: float, path) -> None:
    """One panel per regime, one line per regressor, ground truth dashed."""
    fig = _figure(3.2 * len(trajectories), 2.6)
    axes = fig.subplots(1, len(trajectories), sharey=True, squeeze=False)[0]
    for ax, (label, traj) in zip(axes, trajectories.items()):
        it = np.arange(traj.shape[0])
        for k in range(traj.shape[1]):
            ax.plot(it, traj[:, k], lw=1)
        ax.plot(it, traj.mean(axis=1), color="k", lw=1.5, label="ensemble mean")
        ax.axhline(target, color="0.5", ls="--", lw=2, label="ground truth")
        ax.set_title(label)
        ax.set_xlabel("iteration")
    axes[0].set_ylabel("prediction")
    axes[0].legend(loc="upper right", frameon=False)
    save(fig, path)


@_styled
def plot_surfaces(xs, ys, surfaces: dict, train_x, train_y, path) -> None:
    """Rows are regimes; columns are heads then the ensemble.

    ``surfaces[label] = (per_head, ensemble)`` with ``per_head`` shaped
    ``(K, len(ys), len(xs))``.
    """
    K = next(iter(surfaces.values()))[0].shape[0]
    fig = _figure(2.0 * (K + 2), 2.0 * len(surfaces))
    axes = fig.subplots(len(surfaces), K + 2, squeeze=False)
    pos = train_y.ravel() > 0
    for row, (label, (per_head, ens)) in zip(axes, surfaces.items()):
        row[0].scatter(train_x[pos, 0], train_x[pos, 1], s=3, c="tab:red")
        row[0].scatter(train_x[~pos, 0], train_x[~pos, 1], s=3, c="tab:blue")
        row[0].set_ylabel(label)
        panels = [(f"model {k + 1}", per_head[k]) for k in range(K)] + [("ensemble", ens)]
        for ax, (title, z) in zip(row[1:], panels):
            ax.contourf(xs, ys, np.sign(z), levels=[-1.5, 0, 1.5], colors=["#9ecae1", "#fcbba1"])
            ax.set_title(title)
        for ax in row:
            ax.set_xticks([])
            ax.set_yticks([])
            ax.set_aspect("equal")
    axes[0][0].set_title("data")
    save(fig, path)


@_styled
def plot_training(log, path) -> None:
    fig = _figure(6.4, 2.4)
    axes = fig.subplots(1, 3)
    epochs = log.column("epoch")
    for ax, name in zip(axes, ("mean_head_loss", "ensemble_mse", "diversity")):
        ax.plot(epochs, log.column(name), lw=1)
        ax.set_xlabel("epoch")
        ax.set_title(name.replace("_", " "))
    save(fig, path)


@_styled
def plot_diversity(d: np.ndarray, path) -> None:
    fig = _figure(3.0, 2.6)
    ax = fig.subplots()
    im = ax.imshow(d, cmap="viridis")
    ax.set_xlabel("head")
    ax.set_ylabel("head")
    fig.colorbar(im, ax=ax, label="pairwise distance")
    save(fig, path)


@_styled
def plot_rademacher(rows: list, path) -> None:
    """Measured group/full ratio against the 1/K and 1/sqrt(K) envelopes."""
    K = np.array([r["K"] for r in rows], dtype=float)
    ratio = np.array([r["ratio"] for r in rows])
    err = np.array([3 * r["ratio_std"] for r in rows])
    fig = _figure(3.2, 2.6)
    ax = fig.subplots()
    grid = np.linspace(K.min(), K.max(), 100)
    ax.plot(grid, 1 / grid, "k--", lw=1, label="1/K")
    ax.plot(grid, 1 / np.sqrt(grid), "k:", lw=1, label="1/sqrt(K)")
    ax.errorbar(K, ratio, yerr=err, fmt="o", ms=4, label="measured")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("K")
    ax.set_ylabel("group / full")
    ax.legend(frameon=False)
    save(fig, path)
