"""Matplotlib figures written next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import DVHCurve  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the PNG bytes stable across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_losses(curves: dict[str, list[float]], path, title: str = "", log_y: bool = True) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in curves.items():
        ax.plot(np.arange(1, len(ys) + 1), ys, label=name, lw=1.2)
    if log_y and all(min(ys) > 0 for ys in curves.values() if len(ys)):
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    if len(curves) > 1:
        ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_dvh(curves: dict[str, DVHCurve], path, title: str = "DVH") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, c in curves.items():
        ax.plot(c.doses, 100 * c.volume, label=name, lw=1.2)
    ax.set_xlabel("dose")
    ax.set_ylabel("volume [%]")
    ax.set_ylim(0, 102)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_fluence(fluence: np.ndarray, path, cols: int = 8, title: str = "") -> Path:
    """Per-CP fluence maps in a grid with a shared colour scale."""
    n = fluence.shape[0]
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.2 * rows), squeeze=False)
    vmax = float(fluence.max()) or 1.0
    for i, ax in enumerate(axes.ravel()):
        ax.set_axis_off()
        if i < n:
            ax.imshow(fluence[i], vmin=0, vmax=vmax, cmap="magma", aspect="auto")
            ax.set_title(f"cp {i}", fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_dose(dose: np.ndarray, target: np.ndarray, path, ptv: np.ndarray | None = None) -> Path:
    """Central axial slice of predicted dose, target dose and their difference."""
    s = dose.shape[2] // 2
    vmax = float(max(dose.max(), target.max())) or 1.0
    diff = dose[:, :, s] - target[:, :, s]
    lim = float(np.abs(diff).max()) or 1.0
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    for ax, img, name in zip(axes[:2], (dose[:, :, s], target[:, :, s]), ("plan", "target")):
        im = ax.imshow(img.T, origin="lower", vmin=0, vmax=vmax, cmap="jet")
        ax.set_title(name)
        fig.colorbar(im, ax=ax, fraction=0.046)
    im = axes[2].imshow(diff.T, origin="lower", vmin=-lim, vmax=lim, cmap="RdBu_r")
    axes[2].set_title("plan - target")
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    if ptv is not None:
        for ax in axes:
            ax.contour(ptv[:, :, s].T, levels=[0.5], colors="w", linewidths=0.8)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def plot_metric_bars(summary: dict[str, dict[str, tuple[float, float]]], metric: str, path) -> Path:
    """Mean +- std of one metric per optimizer/step group."""
    names = list(summary)
    means = [summary[n][metric][0] for n in names]
    stds = [summary[n][metric][1] for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(names)), 3.6))
    ax.bar(np.arange(len(names)), means, yerr=stds, capsize=3, color="tab:blue", alpha=0.8)
    ax.set_xticks(np.arange(len(names)), names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    fig.tight_layout()
    return _save(fig, path)
