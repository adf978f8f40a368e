"""PNG figures written next to the CSV outputs (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricReport  # noqa: E402


def figure_path(csv_path, suffix: str = "") -> Path:
    """``report.csv`` -> ``report.png`` (or ``report_<suffix>.png``)."""
    p = Path(csv_path)
    stem = f"{p.stem}_{suffix}" if suffix else p.stem
    return p.with_name(stem + ".png")


def _save(fig, path) -> Path:
    path = Path(path)
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curve(history, path) -> Path:
    steps = [r.step for r in history.records]
    losses = [r.loss for r in history.records]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=1.0, label="train (per batch)")
    if history.val_losses:
        per_epoch = len(steps) / len(history.val_losses)
        ax.plot(
            [per_epoch * (i + 1) - 1 for i in range(len(history.val_losses))],
            history.val_losses,
            "o-",
            ms=2,
            lw=1.0,
            label="validation (per epoch)",
        )
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("residual loss")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_report(report: MetricReport, path) -> Path:
    names = [r.image for r in report.rows]
    x = np.arange(len(names))
    columns = [
        ("PSNR (dB)", [r.psnr_db for r in report.rows], report.mpsnr),
        ("SSIM", [r.ssim for r in report.rows], report.mssim),
        ("FSIM", [r.fsim for r in report.rows], report.mfsim),
    ]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.5))
    for ax, (label, values, mean) in zip(axes, columns):
        ax.bar(x, values, color="tab:blue")
        ax.axhline(mean, color="tab:red", lw=1.0, label=f"mean {mean:.4g}")
        ax.set_title(label)
        ax.set_xticks(x)
        ax.set_xticklabels([Path(n).stem for n in names], rotation=90, fontsize=6)
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(result, path) -> Path:
    seeds = list(result.seeds)
    x = np.arange(len(seeds))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    ax = axes[0]
    ax.bar(x - 0.2, result.full_fit_psnr, 0.4, label="full")
    ax.bar(x + 0.2, result.residual_fit_psnr, 0.4, label="residual only")
    ax.set_xticks(x)
    ax.set_xticklabels([f"seed {s}" for s in seeds])
    ax.set_ylabel("PSNR on training pairs (dB)")
    ax.legend(loc="lower right")
    ax = axes[1]
    deltas = result.deltas()
    keys = ["psnr", "ssim", "fsim"]
    ax.bar(keys, [deltas[k] for k in keys], color=["tab:green" if deltas[k] >= 0 else "tab:red" for k in keys])
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_ylabel("full vs residual only (%)")
    ax.set_title("held-out pairs")
    fig.tight_layout()
    return _save(fig, path)
