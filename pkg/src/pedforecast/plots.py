"""Figures written next to the CSV reports."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def per_frame_curve(path, curve: Sequence[float], n_frames: int, title: str = "Per-frame L1") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    steps = list(range(n_frames + 1, n_frames + 1 + len(curve)))
    ax.plot(steps, curve, marker="o")
    ax.set_xlabel("predicted frame")
    ax.set_ylabel("mean |y - y'|")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def loss_curves(path, rows: Sequence[dict]) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    x = list(range(1, len(rows) + 1))
    for key in ("train_l_recog", "val_l_recog", "val_l_pred"):
        ys = [float(r[key]) for r in rows]
        if any(y == y for y in ys):  # skip all-NaN series
            ax.plot(x, ys, marker=".", label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def step_losses(path, losses: Sequence[float]) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(range(1, len(losses) + 1), losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def ablation_bars(path, rows: Sequence[dict]) -> Path:
    ok = [r for r in rows if r.get("status") == "ok"]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    names = [r["variant"] for r in ok]
    for ax, key, label in zip(axes, ("mean_l1", "mean_ssim", "flop_count"), ("mean L1", "SSIM", "FLOPs")):
        ax.bar(names, [float(r[key]) for r in ok], color="tab:blue")
        ax.set_title(label)
        ax.tick_params(axis="x", rotation=45)
    return _save(fig, path)


def search_scatter(path, rows: Sequence[dict]) -> Path:
    ok = [r for r in rows if r.get("status") == "ok"]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.scatter([float(r["flop_count"]) for r in ok], [float(r["val_mean_l1"]) for r in ok], s=14)
    if ok:
        best = min(ok, key=lambda r: float(r["val_mean_l1"]))
        ax.scatter([float(best["flop_count"])], [float(best["val_mean_l1"])], color="red", label="best")
        ax.legend(fontsize=8)
    ax.set_xlabel("FLOPs per clip")
    ax.set_ylabel("validation mean L1")
    ax.grid(alpha=0.3)
    return _save(fig, path)
