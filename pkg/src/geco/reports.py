"""Report emission: delimited output plus rendered figures.

Every table written here is plain CSV so downstream tooling can consume
it; next to each CSV the same data is rendered as a PNG via the Agg
backend (no display needed).
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalMatrix, write_matrix_csv


def plot_eval_matrix(path, matrix: EvalMatrix):
    """Heatmap of C[after, on] with the raw rates annotated."""
    k = matrix.num_tasks
    fig, ax = plt.subplots(figsize=(1.6 * k + 2.2, 1.3 * k + 1.6))
    shown = np.ma.masked_invalid(matrix.values)
    im = ax.imshow(shown, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(k), matrix.task_ids, rotation=30, ha="right")
    ax.set_yticks(range(k), matrix.task_ids)
    ax.set_xlabel("evaluated task")
    ax.set_ylabel("after training through")
    for i in range(k):
        for j in range(k):
            v = matrix.values[i, j]
            if np.isfinite(v):
                ax.text(j, i, f"{v:.2f}", ha="center", va="center",
                        color="white" if v < 0.6 else "black", fontsize=9)
    fig.colorbar(im, ax=ax, label="success rate")
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def write_matrix_report(out_dir, matrix: EvalMatrix, stem="eval_matrix"):
    write_matrix_csv(out_dir / f"{stem}.csv", matrix)
    plot_eval_matrix(out_dir / f"{stem}.png", matrix)


def write_efficiency_report(out_dir, rows, stem="efficiency"):
    """CSV of (budget, variant, success_rate) plus the paired curve plot."""
    with open(out_dir / f"{stem}.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["budget", "variant", "success_rate"])
        for r in rows:
            writer.writerow([r.budget, r.variant, f"{r.success:.6f}"])
    fig, ax = plt.subplots(figsize=(5.4, 3.6))
    for variant, style in (("from_scratch", "o--"), ("from_continued", "s-")):
        pts = sorted((r.budget, r.success) for r in rows if r.variant == variant)
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], style, label=variant)
    ax.set_xlabel("correction trajectories")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / f"{stem}.png", dpi=140)
    plt.close(fig)


def write_cross_transfer_report(out_dir, rows, stem="cross_transfer"):
    """rows: (source, target, budget, success_rate) tuples."""
    with open(out_dir / f"{stem}.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["source", "target", "budget", "success_rate"])
        for source, target, budget, sr in rows:
            writer.writerow([source, target, budget, f"{sr:.6f}"])
    fig, ax = plt.subplots(figsize=(5.8, 3.4))
    labels = [f"{s}→{t}" for s, t, _, _ in rows]
    ax.bar(range(len(rows)), [r[3] for r in rows], color="tab:blue")
    ax.set_xticks(range(len(rows)), labels, rotation=20, ha="right")
    ax.set_ylabel("target success rate")
    ax.set_ylim(0.0, 1.0)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / f"{stem}.png", dpi=140)
    plt.close(fig)


def plot_routing(path, records):
    """Scatter of group planarity vs linearity colored by winning expert."""
    if not records:
        return
    feats = np.concatenate([r.features for r in records], axis=0)
    winners = np.concatenate([r.weights.argmax(axis=1) for r in records])
    fig, ax = plt.subplots(figsize=(4.8, 4.0))
    for j in range(int(winners.max()) + 1):
        mask = winners == j
        ax.scatter(feats[mask, 0], feats[mask, 1], s=12, alpha=0.6, label=f"expert {j + 1}")
    ax.set_xlabel("linearity")
    ax.set_ylabel("planarity")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def write_feature_csv(path, groups_features):
    """Per-group descriptor dump: group_index,linearity,planarity,saliency,l1,l2,l3."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["group_index", "linearity", "planarity", "saliency",
                         "l1", "l2", "l3"])
        for i, gf in enumerate(groups_features):
            writer.writerow([i, f"{gf.linearity:.9g}", f"{gf.planarity:.9g}",
                             f"{gf.saliency:.9g}", f"{gf.eigvals[0]:.9g}",
                             f"{gf.eigvals[1]:.9g}", f"{gf.eigvals[2]:.9g}"])
