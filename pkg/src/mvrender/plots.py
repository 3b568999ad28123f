"""Figure rendering for the CLI report paths.

Every subcommand that emits delimited output also drops a matplotlib
figure next to it, so a run directory is inspectable without extra
tooling. All functions write PNG files and return the path.
"""
from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

LOSS_COLUMNS = ("color", "depth", "semantic", "eikonal", "sdf_near", "free",
                "total")


def read_metrics_csv(path):
    """metrics.csv -> dict of float column arrays."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no metric rows")
    cols = {}
    for key in rows[0]:
        cols[key] = np.array([float(r[key]) for r in rows])
    return cols


def plot_metrics(csv_path, out_png):
    """Loss curves and the learning-rate schedule from one training run."""
    cols = read_metrics_csv(csv_path)
    fig, (ax_loss, ax_lr) = plt.subplots(
        2, 1, figsize=(8, 7), sharex=True,
        gridspec_kw={"height_ratios": [3, 1]})
    step = cols["step"]
    for name in LOSS_COLUMNS:
        if name in cols:
            width = 2.0 if name == "total" else 1.0
            ax_loss.plot(step, cols[name], label=name, linewidth=width)
    ax_loss.set_yscale("symlog", linthresh=1e-4)
    ax_loss.set_ylabel("loss term")
    ax_loss.legend(ncols=4, fontsize=8)
    ax_loss.grid(alpha=0.3)
    ax_lr.plot(step, cols["lr"], color="tab:gray")
    ax_lr.set_xlabel("step")
    ax_lr.set_ylabel("lr")
    ax_lr.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    return out_png


def plot_ablation(rows, axis, out_png):
    """Summary figure for one ablation matrix (list of row dicts)."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    if axis == "mask_ratio":
        x = [float(r["value"]) for r in rows]
        ax.plot(x, [float(r["total"]) for r in rows], "o-", label="total")
        ax.plot(x, [float(r["color"]) for r in rows], "s--", label="color")
        ax.set_xlabel("mask ratio")
    else:
        labels = [str(r["value"]) for r in rows]
        pos = np.arange(len(labels))
        ax.bar(pos, [float(r["total"]) for r in rows], 0.6)
        ax.set_xticks(pos, labels)
        ax.set_xlabel("disabled loss component")
    ax.set_ylabel("mean loss, last steps")
    ax.grid(alpha=0.3)
    if axis == "mask_ratio":
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    return out_png


def plot_pose_errors(errors, out_png):
    """Histograms of per-sample translation / rotation probe errors."""
    fig, (ax_t, ax_r) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_t.hist(errors.trans_errors, bins=20, color="tab:blue")
    ax_t.set_xlabel("translation error")
    ax_t.set_title(f"mean {errors.mean_trans:.4f}")
    rot = errors.rot_errors[~np.isnan(errors.rot_errors)]
    if rot.size:
        ax_r.hist(rot, bins=20, color="tab:orange")
        ax_r.set_title(f"mean {errors.mean_rot:.4f} rad")
    else:
        ax_r.text(0.5, 0.5, "no valid rotations", ha="center", va="center")
    ax_r.set_xlabel("rotation error (rad)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    return out_png


def plot_image_row(images, out_png, titles=None):
    """One row of images (RGB float [0,1] or scalar maps)."""
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.4))
    if n == 1:
        axes = [axes]
    for i, (ax, img) in enumerate(zip(axes, images)):
        img = np.asarray(img)
        if img.ndim == 2:
            shown = ax.imshow(img, cmap="viridis")
            fig.colorbar(shown, ax=ax, fraction=0.046)
        else:
            ax.imshow(np.clip(img, 0.0, 1.0))
        ax.set_axis_off()
        if titles:
            ax.set_title(titles[i], fontsize=9)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    return out_png
