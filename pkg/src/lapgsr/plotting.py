"""Figures written to files: training curves, evaluation scores, cost reports, pyramid panels.

Uses matplotlib's object API (no pyplot state), so it is safe headless.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.figure import Figure

STYLE = {"dpi": 120, "grid_alpha": 0.3}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=STYLE["dpi"], bbox_inches="tight", metadata={"Software": None})
    return path


def read_log(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def training_curves(log_path, out_path, baseline_psnr: float | None = None) -> Path:
    log = read_log(log_path)
    fig = Figure(figsize=(9, 3.2))
    ax_loss, ax_psnr, ax_ssim = fig.subplots(1, 3)
    if log:
        epochs = log["epoch"]
        ax_loss.semilogy(epochs, log["l_mse"], marker="o", ms=3, label="mse")
        ax_loss.set_title("train mse")
        ax_psnr.plot(epochs, log["val_psnr"], marker="o", ms=3, color="C1", label="model")
        ax_ssim.plot(epochs, log["val_ssim"], marker="o", ms=3, color="C2")
        if baseline_psnr is not None:
            ax_psnr.axhline(baseline_psnr, ls="--", color="gray", label="bicubic")
            ax_psnr.legend(frameon=False, fontsize=8)
    ax_psnr.set_title("val PSNR (dB)")
    ax_ssim.set_title("val SSIM")
    for ax in (ax_loss, ax_psnr, ax_ssim):
        ax.set_xlabel("epoch")
        ax.grid(alpha=STYLE["grid_alpha"])
    fig.tight_layout()
    return _save(fig, out_path)


def eval_scores(report, out_path, baseline=None) -> Path:
    """Per-sample PSNR and SSIM bars, optionally against a baseline report on the same ids."""
    fig = Figure(figsize=(max(5, 0.35 * report.count + 2), 4.5))
    ax_p, ax_s = fig.subplots(2, 1, sharex=True)
    x = np.arange(report.count)
    width = 0.4 if baseline is not None else 0.8
    finite = [p if np.isfinite(p) else np.nan for p in report.psnr]
    ax_p.bar(x - (width / 2 if baseline else 0), finite, width, label="model")
    ax_s.bar(x - (width / 2 if baseline else 0), report.ssim, width)
    if baseline is not None:
        ax_p.bar(x + width / 2, baseline.psnr, width, color="gray", label="bicubic")
        ax_s.bar(x + width / 2, baseline.ssim, width, color="gray")
        ax_p.legend(frameon=False, fontsize=8)
    ax_p.set_ylabel("PSNR (dB)")
    ax_s.set_ylabel("SSIM")
    ax_s.set_xticks(x, report.ids, rotation=90, fontsize=7)
    for ax in (ax_p, ax_s):
        ax.grid(axis="y", alpha=STYLE["grid_alpha"])
    fig.tight_layout()
    return _save(fig, out_path)


def cost_report(rows: Sequence[tuple[str, int, float]], out_path) -> Path:
    """Parameter counts and GFLOPs side by side for labelled configs."""
    labels = [r[0] for r in rows]
    fig = Figure(figsize=(max(5, 0.6 * len(rows) + 3), 3.2))
    ax_n, ax_f = fig.subplots(1, 2)
    y = np.arange(len(rows))
    ax_n.barh(y, [r[1] / 1e3 for r in rows], color="C0")
    ax_f.barh(y, [r[2] for r in rows], color="C3")
    ax_n.set_yticks(y, labels)
    ax_f.set_yticks(y, [])
    ax_n.set_xlabel("parameters (K)")
    ax_f.set_xlabel("GFLOPs")
    for ax in (ax_n, ax_f):
        ax.grid(axis="x", alpha=STYLE["grid_alpha"])
    fig.tight_layout()
    return _save(fig, out_path)


def pyramid_panels(panels: dict[str, np.ndarray], out_path) -> Path:
    """One row of grayscale panels, each already mapped to 0-255."""
    fig = Figure(figsize=(3 * len(panels), 3))
    axes = np.atleast_1d(fig.subplots(1, len(panels)))
    for ax, (title, img) in zip(axes, panels.items()):
        ax.imshow(img, cmap="gray", vmin=0, vmax=255, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, out_path)


def comparison_strip(images: Sequence[np.ndarray], gap: int = 4) -> np.ndarray:
    """Place ``(c, h, w)`` images in [0, 1] side by side as one uint8 image.

    Single-channel images are repeated to RGB when any input is RGB.
    """
    channels = max(img.shape[0] for img in images)
    h = max(img.shape[1] for img in images)
    tiles = []
    for img in images:
        img = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
        if img.shape[0] != channels:
            img = np.repeat(img, channels, axis=0)
        tile = np.ones((channels, h, img.shape[2]))
        tile[:, :img.shape[1]] = img
        tiles.append(tile)
        tiles.append(np.ones((channels, h, gap)))
    strip = np.concatenate(tiles[:-1], axis=2)
    return np.round(strip * 255).astype(np.uint8)
