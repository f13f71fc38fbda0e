"""Report figures (matplotlib, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps reruns byte-identical
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return Path(path)


def plot_curve(curve, path, ylabel="", reference=None):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.errorbar(curve.x, curve.mean, yerr=curve.std, marker="o", ms=3, capsize=2)
    if reference is not None:
        ax.axhline(reference, color="0.5", ls="--", lw=1)
    ax.set_xlabel("subspace dimension")
    ax.set_ylabel(ylabel)
    ax.set_xticks(curve.x)
    ax.set_title(curve.name)
    return _save(fig, path)


def plot_trajectory(traj, model, path):
    from .tracking import normalize_weights
    p = np.array([normalize_weights(x, model.pose_stats()) for x in traj.p])
    fig, (a0, a1) = plt.subplots(2, 1, figsize=(6, 4.5), sharex=True)
    for k in range(p.shape[1]):
        a0.plot(traj.times, p[:, k], lw=1, label=f"pose {k + 1}")
    a0.set_ylabel("normalized weight")
    a0.legend(fontsize=7, ncol=min(p.shape[1], 4))
    a1.plot(traj.times, traj.residuals, lw=1, color="k")
    a1.set_xlabel("time (s)")
    a1.set_ylabel("residual (mm)")
    return _save(fig, path)


def plot_cumulative(thresholds, fractions, path, labels=None):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    fr = np.atleast_2d(fractions)
    for k, row in enumerate(fr):
        ax.plot(thresholds, 100.0 * row, lw=1.2, label=None if labels is None else labels[k])
    ax.set_xlabel("error threshold (mm)")
    ax.set_ylabel("errors below threshold (%)")
    if labels is not None:
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_residuals(residuals, path, title="bootstrap"):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(np.arange(len(residuals)), residuals, marker="o")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean residual (mm)")
    ax.set_title(title)
    return _save(fig, path)
