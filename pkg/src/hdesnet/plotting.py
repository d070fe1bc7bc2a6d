"""Report figures written next to the CSV output (Agg backend, files only)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_bench(latencies_ms: dict[str, np.ndarray], path) -> Path:
    """Per-iteration latency traces and median FPS bars, one series per model."""
    fig, (ax_t, ax_f) = plt.subplots(1, 2, figsize=(10, 3.8), gridspec_kw={"width_ratios": [3, 1]})
    labels, fps = [], []
    for label, lat in latencies_ms.items():
        lat = np.asarray(lat, dtype=float)
        ax_t.plot(np.arange(1, lat.size + 1), lat, lw=1, label=label)
        labels.append(label)
        fps.append(1000.0 / np.median(lat))
    ax_t.set_xlabel("iteration")
    ax_t.set_ylabel("latency (ms)")
    ax_t.legend(loc="upper right", fontsize=8)
    ax_t.grid(alpha=0.3)
    bars = ax_f.bar(labels, fps, color=["tab:gray", "tab:blue"][: len(fps)] if len(fps) <= 2 else None)
    ax_f.bar_label(bars, fmt="%.1f", fontsize=8)
    ax_f.set_ylabel("median FPS")
    ax_f.tick_params(axis="x", labelsize=8, rotation=20)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_eval(frame_ids: list[str], rmse, delta1, iou, path) -> Path:
    """Per-frame RMSE (metres) on the left axis, delta1 and IoU on the right."""
    x = np.arange(len(frame_ids))
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(x) + 3), 3.8))
    ax.bar(x, rmse, color="tab:gray", alpha=0.6, label="rmse (m)")
    ax.set_ylabel("rmse (m)")
    ax.set_xticks(x, frame_ids, rotation=45, ha="right", fontsize=7)
    ax2 = ax.twinx()
    ax2.plot(x, delta1, "o-", color="tab:blue", label="delta1")
    ax2.plot(x, iou, "s-", color="tab:orange", label="people IoU")
    ax2.set_ylim(-0.02, 1.02)
    ax2.set_ylabel("fraction")
    h1, l1 = ax.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax.legend(h1 + h2, l1 + l2, loc="lower right", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
