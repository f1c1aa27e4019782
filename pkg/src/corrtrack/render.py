"""Figure output: track overlays, trajectory plots, metric and loss charts.

Everything renders through the Agg backend with a pinned SVG hash salt
and no embedded timestamps, so rendering the same inputs twice produces
byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "corrtrack"

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import FeatureVolume, TrackSet  # noqa: E402
from .metrics import EvalReport  # noqa: E402

# Okabe-Ito palette: colorblind-safe, high contrast on light backgrounds.
PALETTE = (
    "#e69f00", "#56b4e9", "#009e73", "#f0e442",
    "#0072b2", "#d55e00", "#cc79a7", "#000000",
)

_SVG_META = {"Date": None}
_TRAIL = 8  # frames of history drawn behind each point


def track_color(index: int) -> str:
    return PALETTE[index % len(PALETTE)]


def _new_canvas(height: int, width: int):
    fig_w = 6.0
    fig, ax = plt.subplots(figsize=(fig_w, fig_w * height / width), dpi=100)
    ax.set_xlim(-0.5, width - 0.5)
    ax.set_ylim(height - 0.5, -0.5)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    return fig, ax


def _background(ax, volume: FeatureVolume, frame: int, height: int, width: int) -> None:
    """Feature-magnitude backdrop, stretched onto the pixel canvas."""
    mag = np.linalg.norm(volume.data[frame].astype(np.float64), axis=-1)
    sx = width / volume.grid_width
    sy = height / volume.grid_height
    extent = (-0.5 * sx, (volume.grid_width - 0.5) * sx, (volume.grid_height - 0.5) * sy, -0.5 * sy)
    ax.imshow(mag, cmap="gray", extent=extent, origin="upper", interpolation="nearest")


def render_track_overlays(
    tracks: TrackSet,
    out_dir,
    features: FeatureVolume | None = None,
    prefix: str = "frame",
) -> list[Path]:
    """One PNG per frame: visible points with a short trailing history."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for f in range(tracks.num_frames):
        fig, ax = _new_canvas(tracks.height, tracks.width)
        if features is not None:
            _background(ax, features, f, tracks.height, tracks.width)
        for idx, tr in enumerate(tracks.tracks):
            color = track_color(idx)
            lo = max(0, f - _TRAIL)
            seg_x, seg_y = [], []
            for g in range(lo, f + 1):
                if tr.visible[g]:
                    seg_x.append(tr.positions[g, 0])
                    seg_y.append(tr.positions[g, 1])
            if len(seg_x) > 1:
                ax.plot(seg_x, seg_y, color=color, linewidth=1.0, alpha=0.6)
            if tr.visible[f]:
                ax.plot(tr.positions[f, 0], tr.positions[f, 1], "o", color=color, markersize=4)
        ax.set_title(f"frame {f}")
        path = out_dir / f"{prefix}_{f:03d}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def render_trajectories(tracks: TrackSet, path) -> Path:
    """Whole-clip trajectory plot, one polyline per track, saved as SVG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = _new_canvas(tracks.height, tracks.width)
    for idx, tr in enumerate(tracks.tracks):
        color = track_color(idx)
        vis = tr.visible
        xs = np.where(vis, tr.positions[:, 0], np.nan)
        ys = np.where(vis, tr.positions[:, 1], np.nan)
        ax.plot(xs, ys, color=color, linewidth=1.0)
        ax.plot(
            tr.positions[tr.query_frame, 0], tr.positions[tr.query_frame, 1],
            "o", color=color, markersize=4,
        )
    ax.set_title(f"{len(tracks.tracks)} tracks over {tracks.num_frames} frames")
    fig.savefig(path, metadata=_SVG_META)
    plt.close(fig)
    return path


def render_metrics(report: EvalReport, path, title: str = "evaluation") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = [f"d@{t:g}" for t in report.delta_per_threshold]
    values = list(report.delta_per_threshold.values())
    labels += ["d_avg", "OA", "AJ", "d_3px"]
    values += [report.delta_avg, report.occlusion_accuracy, report.average_jaccard, report.delta_3px]
    if report.delta_seg is not None:
        labels.append("d_seg")
        values.append(report.delta_seg)
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * len(labels), 4.0), dpi=100)
    bars = ax.bar(range(len(values)), values, color=PALETTE[1])
    for rect, val in zip(bars, values):
        ax.annotate(
            f"{val:.3f}", (rect.get_x() + rect.get_width() / 2, val),
            ha="center", va="bottom", fontsize=8,
        )
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylim(0.0, 1.1)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **({"metadata": _SVG_META} if path.suffix == ".svg" else {}))
    plt.close(fig)
    return path


def render_loss_curves(log: list[dict], path, title: str = "training loss") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    steps = [row["step"] for row in log]
    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=100)
    for key, color in (("loss_diff", PALETTE[0]), ("loss_corr", PALETTE[4]), ("joint", PALETTE[5])):
        ax.plot(steps, [row[key] for row in log], color=color, label=key, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **({"metadata": _SVG_META} if path.suffix == ".svg" else {}))
    plt.close(fig)
    return path
