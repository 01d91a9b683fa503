"""Report figures: training curves and error histograms, rendered to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import MetricsReport  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_training_curves(history: list[dict], path) -> Path:
    """Objective, validation errors and learning rate per epoch."""
    epochs = [h["epoch"] for h in history]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(epochs, [h["train_objective"] for h in history], label="train")
    axes[0].plot(epochs, [h["objective"] for h in history], label="val")
    axes[0].set_yscale("log")
    axes[0].set_title("objective")
    axes[0].legend()
    metrics = [h["val_metrics"] for h in history]
    axes[1].plot(epochs, [m["E_t"]["mean"] for m in metrics], color="C2")
    axes[1].set_ylabel("E_t (m)")
    axes[1].set_title("validation errors")
    eq = [m["E_q_deg"]["mean"] for m in metrics]
    if any(v is not None for v in eq):
        twin = axes[1].twinx()
        twin.plot(epochs, [np.nan if v is None else v for v in eq], color="C3")
        twin.set_ylabel("E_q (deg)")
    axes[2].plot(epochs, [h["lr"] for h in history])
    axes[2].set_yscale("log")
    axes[2].set_title("learning rate")
    for ax in axes:
        ax.set_xlabel("epoch")
    return _save(fig, path)


def plot_error_histograms(report: MetricsReport, path) -> Path:
    """Histograms of per-sample translation and rotation errors."""
    panels = [("E_t (m)", report.t_errors)]
    if report.q_errors_deg is not None:
        panels.append(("E_q (deg)", report.q_errors_deg))
    fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 3.5), squeeze=False)
    for ax, (label, values) in zip(axes[0], panels):
        ax.hist(values, bins=30, color="C0")
        ax.axvline(float(np.mean(values)), color="C3", linestyle="--", label="mean")
        ax.set_xlabel(label)
        ax.set_ylabel("count")
        ax.legend()
    return _save(fig, path)


def plot_ablation(rows: list[dict], path) -> Path:
    """Bar chart of mean rotation error per ablation row; rows not run are left blank."""
    labels = [f"{r['init']}\nHC {'on' if r['HC'] else 'off'}\nCDA {'on' if r['CDA'] else 'off'}" for r in rows]
    means = [np.nan if r["E_q_mean_deg"] is None else r["E_q_mean_deg"] for r in rows]
    stds = [0.0 if r["E_q_std_deg"] is None else r["E_q_std_deg"] for r in rows]
    fig, ax = plt.subplots(figsize=(9, 3.5))
    ax.bar(range(len(rows)), means, yerr=stds, capsize=3)
    ax.set_xticks(range(len(rows)), labels, fontsize=8)
    ax.set_ylabel("E_q (deg)")
    return _save(fig, path)
