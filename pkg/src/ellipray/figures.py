"""Matplotlib figure rendering for the CLI report paths (headless)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_image_png(path, image, title=None):
    """Preview PNG of a linear-radiance image (gamma 1/2.2, clamped)."""
    shown = np.clip(np.asarray(image), 0.0, 1.0) ** (1.0 / 2.2)
    h, w = shown.shape[:2]
    fig, ax = plt.subplots(figsize=(max(w / 64.0, 2.0), max(h / 64.0, 2.0)))
    ax.imshow(shown, interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.savefig(path, bbox_inches="tight", dpi=128)
    plt.close(fig)


def save_epi_figure(path, epi, mode, max_jump):
    shown = np.clip(np.asarray(epi), 0.0, 1.0) ** (1.0 / 2.2)
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    ax.imshow(shown, aspect="auto", interpolation="nearest")
    ax.set_xlabel("scanline pixel")
    ax.set_ylabel("orbit frame")
    ax.set_title(f"{mode} EPI, max inter-frame jump {max_jump:.2e}")
    fig.savefig(path, bbox_inches="tight", dpi=128)
    plt.close(fig)


def save_profile_figure(path, offsets, curves):
    """curves maps a density label to its opacity samples over offsets."""
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for label, values in curves.items():
        ax.plot(offsets, values, label=f"density {label}")
    ax.set_xlabel("impact parameter")
    ax.set_ylabel("opacity")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.savefig(path, bbox_inches="tight", dpi=128)
    plt.close(fig)


def save_metrics_figure(path, metrics):
    steps = [m["step"] for m in metrics]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.0, 5.0), sharex=True)
    ax1.plot(steps, [m["loss"] for m in metrics], lw=0.8)
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax2.plot(steps, [m["psnr"] for m in metrics], lw=0.8)
    ax2.set_ylabel("train PSNR (dB)")
    ax2.set_xlabel("step")
    fig.savefig(path, bbox_inches="tight", dpi=128)
    plt.close(fig)
