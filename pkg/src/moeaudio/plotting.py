"""Report figures written straight to PNG files (no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def loss_curves(metrics: list[dict], path) -> Path:
    """Total, NTP and auxiliary loss per step, with stage boundaries marked."""
    steps = np.arange(len(metrics))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [m["l_ntp"] for m in metrics], label="L_NTP")
    ax.plot(steps, [m["loss"] for m in metrics], label="total", alpha=0.6)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax2 = ax.twinx()
    ax2.plot(steps, [m["l_aux"] for m in metrics], color="tab:red", alpha=0.5, label="L_aux")
    ax2.set_ylabel("L_aux")
    for i in range(1, len(metrics)):
        if metrics[i]["stage"] != metrics[i - 1]["stage"]:
            ax.axvline(i, color="grey", linestyle="--")
            ax.text(i, ax.get_ylim()[1], metrics[i]["stage"], va="top", fontsize=8)
    lines = ax.get_legend_handles_labels()
    lines2 = ax2.get_legend_handles_labels()
    ax.legend(lines[0] + lines2[0], lines[1] + lines2[1], loc="upper right")
    return _save(fig, path)


def expert_utilization(fractions, path, title: str = "routed token share per expert") -> Path:
    fractions = np.asarray(fractions, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(np.arange(len(fractions)), fractions)
    ax.axhline(fractions.sum() / len(fractions), color="grey", linestyle="--", label="balanced")
    ax.set_xlabel("expert")
    ax.set_ylabel("fraction")
    ax.set_xticks(np.arange(len(fractions)))
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def mixture_frequencies(target: dict[str, float], observed: dict[str, float], path, title: str = "") -> Path:
    names = list(target)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(x - 0.2, [target[n] for n in names], 0.4, label="target")
    ax.bar(x + 0.2, [observed.get(n, 0.0) for n in names], 0.4, label="sampled")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("share")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def accuracy_bars(report: dict, path) -> Path:
    cats = report.get("by_category") or {}
    names = list(cats) + ["ALL"]
    values = [cats[n]["accuracy"] for n in cats] + [report["accuracy"]]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(np.arange(len(names)), values)
    ax.axhline(0.25, color="grey", linestyle=":", label="chance")
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.legend()
    return _save(fig, path)
