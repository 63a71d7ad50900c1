"""Figures rendered next to the delimited reports.

All output is Agg-backed PNG with fixed metadata, so the bytes are
reproducible for a given config and master seed.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

_SAVE = dict(dpi=130, metadata={"Software": None})


def _finish(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_battery(results, threshold: float, path: Path) -> Path:
    names = [r.name for r in results]
    zs = [r.z_score for r in results]
    fig, ax = plt.subplots(figsize=(max(6, 0.45 * len(names)), 3.6))
    colors = ["tab:blue" if r.passed else "tab:red" for r in results]
    ax.bar(range(len(names)), zs, color=colors)
    ax.axhline(threshold, color="k", linestyle="--", linewidth=1, label=f"threshold {threshold:g}")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("|z|")
    ax.set_title("forward vs dual: two-sample z per check")
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, path)


def plot_ergodic(report, path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    t = np.asarray(report.t_grid)
    for j, name in enumerate(report.moment_names):
        axes[0].plot(t, report.distances[:, j], marker="o", ms=3, label=name)
    axes[0].plot(t, 4 * report.combined_se.max(axis=1), "k--", lw=1, label="4 SE")
    axes[0].set_xlabel("t")
    axes[0].set_ylabel("|moment difference|")
    axes[0].set_title("two initial laws, moment distance")
    axes[0].legend(frameon=False, fontsize=7)
    axes[1].plot(t, report.trapped_fraction, marker="s", ms=3, color="tab:green")
    axes[1].axhline(0.99, color="k", linestyle=":", lw=1)
    axes[1].set_xlabel("t")
    axes[1].set_ylabel("fraction of dual replicas trapped")
    axes[1].set_ylim(0, 1.02)
    axes[1].set_title("set-valued dual trapping")
    return _finish(fig, path)


def plot_decoupling(report, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.4))
    d = np.asarray(report.distances)
    ax.errorbar(
        d, report.collision_frequency, yerr=4 * report.collision_se,
        marker="o", ms=4, label="collision frequency",
    )
    ax.plot(d, report.bound, "k--", lw=1, label="calibrated bound")
    ax.set_xlabel("initial hierarchical distance")
    ax.set_ylabel("P(clouds meet before trapping)")
    ax.set_xticks(d)
    ax.set_title(f"cloud decoupling (fitted trap rate {report.trapping_rate:.3g})")
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, path)


def plot_markov_membership(times, mc, oracle, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(times, oracle, "k-", lw=1.2, label="matrix exponential")
    ax.plot(times, mc, "o", ms=4, color="tab:orange", label="set-dual membership")
    ax.set_xlabel("t")
    ax.set_ylabel("P[Z_t stays at the start type]")
    ax.set_title("set-valued dual of a Markov chain")
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, path)
