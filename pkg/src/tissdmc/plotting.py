"""Figures for the bench and evaluation reports (rendered to files, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MODE_STYLE = {"bp": dict(color="#c0392b", marker="o", label="BP"),
              "dmc": dict(color="#2471a3", marker="s", label="DMC")}


def _rows_for(rows, mode):
    sel = sorted((r for r in rows if r["mode"] == mode), key=lambda r: int(r["J"]))
    return np.array([int(r["J"]) for r in sel]), sel


def plot_bench(rows, path) -> Path:
    """Peak tape nodes and wall time against J, one line per gradient mode."""
    path = Path(path)
    fig, (ax_mem, ax_time) = plt.subplots(1, 2, figsize=(9, 3.6))
    for mode, style in MODE_STYLE.items():
        J, sel = _rows_for(rows, mode)
        if not len(J):
            continue
        ax_mem.plot(J, [int(r["peak_nodes"]) for r in sel], **style)
        total = [float(r["fwd_ms"]) + float(r["bwd_ms"]) for r in sel]
        ax_time.plot(J, np.array(total) / 1e3, **style)
    ax_mem.set_xlabel("iterations J")
    ax_mem.set_ylabel("peak tape nodes")
    ax_mem.set_title("memory")
    ax_time.set_xlabel("iterations J")
    ax_time.set_ylabel("forward + backward [s]")
    ax_time.set_title("time")
    for ax in (ax_mem, ax_time):
        ax.grid(alpha=0.3)
        ax.legend(frameon=False)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_evaluation(rows, path, metric: str = "si_sdr_imp") -> Path:
    """Box plot of a per-sample metric, grouped by model and channel count."""
    path = Path(path)
    groups: dict = {}
    for r in rows:
        groups.setdefault(f"{r['model']}\n{r['n_channels']}ch", []).append(float(r[metric]))
    labels = sorted(groups)
    fig, ax = plt.subplots(figsize=(max(4, 1.4 * len(labels) + 1), 3.6))
    ax.boxplot([groups[k] for k in labels], showmeans=True)
    ax.set_xticks(range(1, len(labels) + 1), labels)
    ax.axhline(0.0, color="0.5", lw=0.8, ls="--")
    ax.set_ylabel(metric.replace("_", " ") + " [dB]")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(history, path) -> Path:
    """Training loss per step with validation points overlaid."""
    path = Path(path)
    steps = [h["step"] for h in history if h.get("loss") is not None]
    loss = [h["loss"] for h in history if h.get("loss") is not None]
    fig, ax = plt.subplots(figsize=(6, 3.4))
    ax.plot(steps, loss, color="0.6", lw=0.8, label="train")
    if len(loss) >= 10:
        kernel = np.ones(10) / 10
        ax.plot(steps[9:], np.convolve(loss, kernel, mode="valid"), color="k", lw=1.2,
                label="train (10-step mean)")
    valid = [(h["step"], h["valid_loss"]) for h in history if "valid_loss" in h]
    if valid:
        ax.plot(*zip(*valid), "o-", color="#2471a3", label="validation")
    ax.set_xlabel("step")
    ax.set_ylabel("loss [-dB]")
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
