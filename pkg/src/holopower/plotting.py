"""Figures and image dumps. Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

COLORS = {"cold": "#1f77b4", "warm": "#d62728", "train": "#2ca02c", "val": "#9467bd"}

plt.rcParams.update({
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
})


def save_rgb(img, path):
    """Save a ``(3, H, W)`` or ``(H, W)`` array with values in [0, 1] as 8-bit PNG."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = np.moveaxis(img, 0, -1)
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(data).save(path)
    return Path(path)


def plot_convergence(report, path, title=None):
    """Mean (and 10-90 percentile band) loss curves of both arms."""
    done = report.completed
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for arm in ("cold", "warm"):
        curves = np.array([getattr(t, arm).curve for t in done])
        steps = np.arange(curves.shape[1])
        lo, hi = np.percentile(curves, [10, 90], axis=0)
        ax.fill_between(steps, lo, hi, color=COLORS[arm], alpha=0.15, lw=0)
        label = "uniform init" if arm == "cold" else "estimated init"
        ax.plot(steps, curves.mean(axis=0), color=COLORS[arm], lw=1.6, label=label)
    for c in report.checkpoints:
        ax.axvline(c, color="0.4", ls=":", lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("optimization step")
    ax.set_ylabel("image loss")
    ax.set_title(title or f"{len(done)} targets, scale x{report.scale:g}")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_training(log_entries, path, initial_val=None):
    epochs = [e["epoch"] for e in log_entries]
    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    ax.plot(epochs, [e["train_loss"] for e in log_entries], color=COLORS["train"], label="train")
    val = [e["val_loss"] for e in log_entries]
    if any(v is not None for v in val):
        ax.plot(epochs, val, color=COLORS["val"], label="validation")
    if initial_val is not None:
        ax.axhline(initial_val, color="0.5", ls="--", lw=1, label="untrained validation")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("permutation-invariant loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_loss_history(history, path, label=None):
    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    ax.plot(np.arange(len(history)), history, color=COLORS["cold"], label=label)
    ax.set_yscale("log")
    ax.set_xlabel("optimization step")
    ax.set_ylabel("image loss")
    if label:
        ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def render_array(array, kind, path, title=None):
    """Render a stored phase stack or complex field.

    Phases are wrapped to [0, 2pi) with a cyclic colormap, one panel per
    subframe; complex fields show amplitude and phase side by side.
    """
    array = np.asarray(array)
    if kind == "complex":
        panels = [(np.abs(array), "amplitude", "gray"),
                  (np.mod(np.angle(array), 2 * np.pi), "phase", "twilight")]
    else:
        stack = array if array.ndim == 3 else array[None]
        if kind == "phase":
            panels = [(np.mod(p, 2 * np.pi), f"subframe {i}", "twilight")
                      for i, p in enumerate(stack)]
        else:
            panels = [(p, f"channel {i}", "viridis") for i, p in enumerate(stack)]
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.2), squeeze=False)
    for ax, (data, label, cmap) in zip(axes[0], panels):
        im = ax.imshow(data, cmap=cmap, interpolation="nearest")
        ax.set_title(label)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.grid(False)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
