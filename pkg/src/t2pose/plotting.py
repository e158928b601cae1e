"""Matplotlib figures written as deterministic SVG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp, so the same data gives the same bytes
plt.rcParams["svg.hashsalt"] = "t2pose"
_META = {"Date": None}


def save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def plot_tempered_demo(result, path) -> None:
    """Analytic tempered densities over sample histograms, one panel per T."""
    temps = list(result.densities)
    fig, axes = plt.subplots(1, len(temps), figsize=(4 * len(temps), 3.2), sharex=True)
    axes = np.atleast_1d(axes)
    centers = 0.5 * (result.bin_edges[1:] + result.bin_edges[:-1])
    width = np.diff(result.bin_edges)
    for ax, T in zip(axes, temps):
        ax.bar(centers, result.histograms[T], width=width, color="#9ecae1", edgecolor="none",
               label=f"samples (N={result.config.n_candidates} candidates)")
        ax.plot(result.x, result.densities[T], color="#08306b", lw=1.5, label="analytic")
        ax.set_title(f"T = {T:g}")
        ax.set_xlabel("x")
    axes[0].set_ylabel("density")
    axes[0].legend(fontsize=7, loc="upper left")
    fig.tight_layout()
    save(fig, path)


def plot_score_heatmap(matrix, captions, path) -> None:
    m = np.asarray(matrix)
    n = m.shape[0]
    fig, ax = plt.subplots(figsize=(2.5 + 0.9 * n, 1.5 + 0.7 * n))
    im = ax.imshow(m, vmin=-1, vmax=1, cmap="viridis")
    for i in range(n):
        for j in range(m.shape[1]):
            ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center", fontsize=7,
                    color="white" if m[i, j] < 0.3 else "black")
    ax.set_yticks(range(n))
    ax.set_yticklabels(captions, fontsize=7)
    ax.set_xticks(range(m.shape[1]))
    ax.set_xticklabels([f"pose {j}" for j in range(m.shape[1])], fontsize=7)
    ax.set_xlabel("pose")
    fig.colorbar(im, ax=ax, label="score")
    fig.tight_layout()
    save(fig, path)


def plot_benchmark(report, path) -> None:
    """Mean scores of both arms with 2-sigma error bars."""
    fig, ax = plt.subplots(figsize=(4, 3.5))
    names = [report.label_a, report.label_b]
    means = [report.mean_a, report.mean_b]
    errs = [report.half_width_a, report.half_width_b]
    ax.bar(names, means, yerr=errs, capsize=8, color=["#3182bd", "#bdbdbd"])
    ax.set_ylabel("mean score (95% CI)")
    ax.set_title(f"win rate {report.label_a} vs {report.label_b}: {report.win_rate:.0%}")
    lo = min(m - e for m, e in zip(means, errs))
    ax.set_ylim(min(0.0, lo - 0.05), 1.0)
    fig.tight_layout()
    save(fig, path)


def plot_loss_curve(steps, losses, path, window: int = 50) -> None:
    from .trainer import smooth

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(steps, losses, color="#c6dbef", lw=0.8, label="loss")
    ax.plot(steps, smooth(losses, window), color="#08519c", lw=1.5, label=f"moving average ({window})")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    save(fig, path)
