"""Figure rendering for analysis reports (files only, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

YLABELS = {
    "generation": "commit generation cost (us)",
    "processing": "commit processing cost (us)",
    "commit_size": "commit size (bytes)",
    "latency_mean": "mean latency (ms)",
    "latency_max": "max latency (ms)",
    "welcome_size": "Welcome size (bytes)",
    "group_info_size": "GroupInfo size (bytes)",
    "welcome_cost": "Welcome processing cost (us)",
    "join_cost": "external join cost (us)",
    "commit_welcome_cost": "commit + Welcome cost (us)",
    "auc_generation": "auc, generation (us)",
    "auc_processing": "auc, processing (us)",
    "auc_size": "auc, message size (bytes)",
}


def plot_metric(series_by_label: dict[str, list[tuple[float, float]]], metric: str, path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, series in sorted(series_by_label.items()):
        if series:
            xs, ys = zip(*series)
            ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel("group size (members)")
    ax.set_ylabel(YLABELS.get(metric, metric))
    ax.grid(True, alpha=0.3)
    if len(series_by_label) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
