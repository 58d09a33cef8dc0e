"""Report figures written to image files (no interactive display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .align import DEFAULT_BINS, signature  # noqa: E402
from .pipeline import pair_colors, registration_coordinates  # noqa: E402

GREY = "0.65"


def plot_signatures(coords_x, coords_y, pairs, bins=DEFAULT_BINS, max_pairs=6):
    """Histogram pairs of the first retained eigenfunctions, Y flipped by its sign."""
    pairs = list(pairs)[:max_pairs]
    fig, axes = plt.subplots(2, max(1, len(pairs)), figsize=(2.2 * max(1, len(pairs)), 3.6),
                             squeeze=False, sharey="row")
    for j, p in enumerate(pairs):
        u = coords_x[:, p.k_x]
        v = p.sign * coords_y[:, p.l_y]
        a = max(np.abs(u).max(), np.abs(v).max())
        centers = (np.arange(bins) + 0.5) / bins * 2 * a - a
        for row, (vec, name) in enumerate(((u, f"X u{p.k_x}"), (v, f"Y {'+' if p.sign > 0 else '-'}u{p.l_y}"))):
            ax = axes[row, j]
            ax.bar(centers, signature(vec, bins, a).bins, width=2 * a / bins, color="C0" if row == 0 else "C1")
            ax.set_title(name, fontsize=8)
            ax.tick_params(labelsize=6)
        axes[1, j].set_xlabel(f"cost {p.cost:.3f}", fontsize=7)
    fig.tight_layout()
    return fig


def plot_embeddings(x, y, rotation_before, rotation_after, dims=(0, 1)):
    """Two-coordinate projections of X and of R Y, before and after registration."""
    i, j = dims
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.8))
    for ax, rot, title in zip(axes, (rotation_before, rotation_after), ("initial", "final")):
        ry = y @ np.asarray(rot).T
        ax.scatter(x[:, i], x[:, j], s=2, c="C0", label="X", alpha=0.6, linewidths=0)
        ax.scatter(ry[:, i], ry[:, j], s=2, c="C1", label="R Y", alpha=0.6, linewidths=0)
        ax.set_title(title)
        ax.set_xlabel(f"dim {i}")
        ax.set_ylabel(f"dim {j}")
    axes[0].legend(markerscale=4, fontsize=8)
    fig.tight_layout()
    return fig


def plot_likelihood(trace):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(np.arange(len(trace)), trace, "o-", ms=3)
    ax.set_xlabel("iteration")
    ax.set_ylabel("log-likelihood")
    fig.tight_layout()
    return fig


def plot_correspondences(points_x, points_y, records, gap=5.0):
    """Both voxel sets side by side; matched pairs share a colour, the rest is grey."""
    px = np.asarray(points_x, dtype=float)
    py = np.asarray(points_y, dtype=float)
    colors_y = pair_colors(py) / 255.0
    cx = np.full((len(px), 3), 0.65)
    cy = np.full((len(py), 3), 0.65)
    for r in records:
        if r.label == "matched":
            cx[r.source_index] = colors_y[r.target_index]
            cy[r.target_index] = colors_y[r.target_index]
    shift = np.array([px[:, 0].max() - py[:, 0].min() + gap, 0.0, 0.0])
    pts = np.vstack([px, py + shift])
    fig = plt.figure(figsize=(7, 4.5))
    ax = fig.add_subplot(projection="3d")
    ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2], c=np.vstack([cx, cy]), s=2, depthshade=False)
    ax.set_axis_off()
    fig.tight_layout()
    return fig


def render_report_figures(out, out_dir, prefix="match"):
    """Write the standard figures of a pipeline run; returns the file names."""
    out_dir = Path(out_dir)
    ex, ey = out.embeddings
    al = out.alignment
    reg = out.registration
    vx, vy = out.voxels
    x, y = al.select(registration_coordinates(ex), registration_coordinates(ey))
    dims = (0, 1) if x.shape[1] > 1 else (0, 0)
    figures = {
        "signatures": plot_signatures(ex.coordinates, ey.coordinates, al.pairs, bins=al_bins(out)),
        "embedding": plot_embeddings(x, y, al.initial_rotation, reg.params.rotation, dims),
        "likelihood": plot_likelihood(reg.log_likelihood_trace),
        "correspondences": plot_correspondences(vx.points, vy.points, out.records),
    }
    names = []
    for key, fig in figures.items():
        name = f"{prefix}_{key}.png"
        fig.savefig(out_dir / name, dpi=110)
        plt.close(fig)
        names.append(name)
    return names


def al_bins(out):
    return out.report["config"]["align"]["bins"]
