"""Figures written next to reports: success plots and training-loss curves."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .world import THRESHOLDS, success_curve  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.stem, suffix=path.suffix)
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=100, metadata={"Software": None})
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def success_plot(ious_by_setting: dict, path, title: str = "Success plot") -> Path:
    """One curve per reference setting; the legend carries each curve's AUC."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, ious in ious_by_setting.items():
        curve = success_curve(ious)
        ax.plot(THRESHOLDS, curve, label=f"{label} [{curve.mean():.3f}]")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("success rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend(loc="lower left")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def loss_curve(history, path, window: int = 50) -> Path:
    """Total and per-term training losses, smoothed with a trailing mean."""
    keys = ("total", "l_tgt", "l_cls", "l_box", "mmc_sum")
    rows = [h.as_dict() if hasattr(h, "as_dict") else h for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    if rows:
        steps = np.arange(1, len(rows) + 1)
        # short runs still get a curve rather than a single averaged point
        window = max(1, min(window, len(rows) // 10))
        for key in keys:
            vals = np.array([r[key] for r in rows], float)
            if key == "mmc_sum" and not np.any(vals):
                continue
            kernel = np.ones(window) / window
            smooth = np.convolve(vals, kernel, mode="valid")
            ax.plot(steps[len(steps) - len(smooth):], smooth, label=key)
        ax.set_yscale("log")
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("Training loss")
    ax.grid(alpha=0.3)
    return _save(fig, path)
