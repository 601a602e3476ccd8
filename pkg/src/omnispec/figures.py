"""Figure rendering for CLI reports. Every plot lands next to its CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def loss_curve(csv_path, out_path) -> None:
    cols = _read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(cols["step"], cols["loss"], lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def pretrain_curves(csv_path, out_path) -> None:
    cols = _read_csv(csv_path)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("loss", "loss_spec", "loss_spat"):
        axes[0].plot(cols["step"], cols[key], lw=1.0, label=key)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].legend()
    axes[0].grid(alpha=0.3)
    axes[1].plot(cols["step"], cols["momentum"], label="momentum")
    ax2 = axes[1].twinx()
    ax2.plot(cols["step"], cols["lr"], color="tab:orange", label="lr")
    ax2.set_ylabel("lr")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("momentum")
    axes[1].grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def flops_scaling(channels, table: dict[str, list[float]], out_path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("spectral_self_attn", "spectral_cross_attn", "spatial", "total"):
        ax.plot(channels, table[key], marker="o", ms=3, label=key)
    ax.set_xlabel("channels")
    ax.set_ylabel("multiply-accumulates")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def per_class_bars(class_ids, values, metric_name, out_path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([str(c) for c in class_ids], values, color="tab:blue")
    ax.set_xlabel("class")
    ax.set_ylabel(metric_name)
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def camera_banks(banks, out_path) -> None:
    from .camera import WAVELENGTH_GRID

    fig, axes = plt.subplots(len(banks), 1, figsize=(7, 1.6 * len(banks)),
                             sharex=True, squeeze=False)
    for ax, (name, bank) in zip(axes[:, 0], banks):
        for row in bank.response:
            ax.plot(WAVELENGTH_GRID, row, lw=0.8)
        ax.set_ylabel(name, fontsize=8)
    axes[-1, 0].set_xlabel("wavelength [nm]")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def confusion_heatmap(conf: np.ndarray, out_path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(conf, cmap="viridis")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for (i, j), v in np.ndenumerate(conf):
        ax.text(j, i, str(int(v)), ha="center", va="center", fontsize=7,
                color="white" if v < conf.max() / 2 else "black")
    fig.colorbar(im)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
