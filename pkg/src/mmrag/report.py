"""Figure rendering for run reports: loss curves, evaluation summaries,
ablation comparisons, and the alpha sweep. Files land next to the
delimited metrics output.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_loss_curve(curve: list[dict], title: str, path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [row["epoch"] for row in curve]
    losses = [row["loss"] for row in curve]
    ax.plot(epochs, losses, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_metric_bars(metrics: dict[str, float], title: str, path,
                       ylabel: str = "value") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(metrics)), 4))
    names = list(metrics)
    values = [metrics[n] for n in names]
    ax.bar(names, values, color="#4878a8")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_ablation(arms: dict[str, dict[str, float]], title: str, path) -> Path:
    """Grouped bars: one group per metric, one bar per arm."""
    path = Path(path)
    metric_names = sorted({m for vals in arms.values() for m in vals})
    arm_names = list(arms)
    fig, ax = plt.subplots(figsize=(max(7, 1.5 * len(metric_names)), 4.5))
    width = 0.8 / max(1, len(arm_names))
    for j, arm in enumerate(arm_names):
        xs = [i + j * width for i in range(len(metric_names))]
        ys = [arms[arm].get(m, 0.0) for m in metric_names]
        ax.bar(xs, ys, width=width, label=arm)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(metric_names))])
    ax.set_xticklabels(metric_names, rotation=20)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_alpha_sweep(points: dict[float, float], title: str, path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    alphas = sorted(points)
    ax.plot(alphas, [points[a] for a in alphas], marker="s")
    ax.set_xscale("log")
    ax.set_xlabel("alpha")
    ax.set_ylabel("exact match")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
