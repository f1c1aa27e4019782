"""Feature-space point matching.

A query point is localized in a target frame by scoring its feature vector
against every cell of the target frame's feature map (cosine similarity) and
taking a windowed soft-argmax around the best cell. Positions are pixel
coordinates at the call boundary; the pixel->grid mapping is
x_grid = x_px * (W_grid / W_px) and its inverse on the way out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CorrtrackError, FeatureVolume, Point, Track, TrackSet, ValidationError


class DegenerateQueryError(CorrtrackError):
    """The query feature has zero norm, so cosine similarity is undefined."""


@dataclass(frozen=True)
class MatchConfig:
    """Knobs for soft-argmax matching.

    window_radius is in feature-grid cells (Euclidean distance from the
    argmax cell). The default follows the reference setting for 44x81 grids;
    small grids want a much smaller window, see the synthetic benchmarks.
    occlusion_threshold applies to the raw (pre-clamp) best similarity.
    """

    window_radius: float = 35.0
    occlusion_threshold: float = 0.6
    negative_weight_policy: str = "clamp_to_zero"

    def __post_init__(self) -> None:
        if self.window_radius <= 0:
            raise ValidationError("window_radius must be positive")
        if self.negative_weight_policy != "clamp_to_zero":
            raise ValidationError(f"unknown negative_weight_policy {self.negative_weight_policy!r}")


@dataclass
class CostVolume:
    """Cosine similarities of one query against one frame, shape (H, W)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError(f"cost volume must be 2-D, got {self.values.shape}")


def bilinear_weights(x: float, y: float, height: int, width: int):
    """Bilinear support for a sample at (x, y) on an integer node grid.

    Returns (rows, cols, weights), each length 4. The sample domain is
    [0, width) x [0, height); between the last node and the domain edge the
    missing node is replaced by the edge node (replication). Out-of-domain
    positions raise.
    """
    if not (0.0 <= x < width and 0.0 <= y < height):
        raise ValidationError(f"sample position ({x}, {y}) outside [0, {width}) x [0, {height})")
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    tx = x - x0
    ty = y - y0
    x1 = min(x0 + 1, width - 1)
    y1 = min(y0 + 1, height - 1)
    rows = np.array([y0, y0, y1, y1], dtype=np.intp)
    cols = np.array([x0, x1, x0, x1], dtype=np.intp)
    weights = np.array(
        [(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty],
        dtype=np.float64,
    )
    return rows, cols, weights


def sample_feature(vol: FeatureVolume, frame: int, p: Point) -> np.ndarray:
    """Bilinearly sample frame `frame` of `vol` at grid position p.

    p is in feature-grid units. Returns a float64 channel vector.
    """
    if not 0 <= frame < vol.num_frames:
        raise ValidationError(f"frame {frame} out of range [0, {vol.num_frames})")
    rows, cols, weights = bilinear_weights(p.x, p.y, vol.grid_height, vol.grid_width)
    cells = vol.data[frame, rows, cols, :].astype(np.float64)
    return weights @ cells


def cost_volume(query_feature: np.ndarray, vol: FeatureVolume, frame: int) -> CostVolume:
    """Cosine similarity of a query feature against every cell of a frame.

    Cells with a zero-norm feature get similarity 0. A zero-norm query
    raises DegenerateQueryError.
    """
    q = np.asarray(query_feature, dtype=np.float64)
    if q.shape != (vol.channels,):
        raise ValidationError(f"query feature has shape {q.shape}, expected ({vol.channels},)")
    qn = float(np.linalg.norm(q))
    if qn == 0.0:
        raise DegenerateQueryError("query feature has zero norm")
    fmap = vol.data[frame].astype(np.float64)
    h, w = fmap.shape[:2]
    flat = fmap.reshape(h * w, -1)
    dots = flat @ q
    norms = np.linalg.norm(flat, axis=1)
    sims = np.zeros(h * w, dtype=np.float64)
    ok = norms > 0.0
    sims[ok] = dots[ok] / (qn * norms[ok])
    return CostVolume(sims.reshape(h, w))


def argmax_cell(values: np.ndarray) -> tuple[int, int]:
    """Row-major first occurrence of the maximum: smallest row, then column."""
    idx = int(np.argmax(values))
    return idx // values.shape[1], idx % values.shape[1]


_window_cache: dict[tuple[int, int], np.ndarray] = {}


def _dist2_grid(h: int, w: int) -> np.ndarray:
    key = (h, w)
    grid = _window_cache.get(key)
    if grid is None:
        ys = np.arange(h, dtype=np.float64)[:, None]
        xs = np.arange(w, dtype=np.float64)[None, :]
        grid = np.stack(np.broadcast_arrays(ys, xs))  # (2, H, W): row, col
        _window_cache[key] = grid
    return grid


def window_mask(h: int, w: int, center: tuple[int, int], radius: float) -> np.ndarray:
    """Cells within Euclidean distance `radius` of `center` (row, col)."""
    grid = _dist2_grid(h, w)
    dy = grid[0] - center[0]
    dx = grid[1] - center[1]
    return dy * dy + dx * dx <= radius * radius


def soft_argmax(cv: CostVolume, cfg: MatchConfig) -> Point:
    """Similarity-weighted centroid over a window around the argmax cell.

    Weights are the similarities clamped at zero; cells outside the window
    contribute nothing. If every clamped weight is zero the argmax cell
    itself is returned. Output is in grid coordinates (x = col, y = row).
    """
    values = cv.values
    h, w = values.shape
    r0, c0 = argmax_cell(values)
    mask = window_mask(h, w, (r0, c0), cfg.window_radius)
    weights = np.where(mask, np.maximum(values, 0.0), 0.0)
    total = float(weights.sum())
    if total == 0.0:
        return Point(float(c0), float(r0))
    grid = _dist2_grid(h, w)
    x = float((weights * grid[1]).sum() / total)
    y = float((weights * grid[0]).sum() / total)
    return Point(x, y)


def _resolve_scale(vol: FeatureVolume, image_size: tuple[int, int] | None):
    """Pixel canvas (H_px, W_px) and the px->grid / grid->px scale factors."""
    if image_size is None:
        image_size = (vol.grid_height, vol.grid_width)
    h_px, w_px = image_size
    if h_px < 1 or w_px < 1:
        raise ValidationError(f"bad image size {image_size}")
    to_grid = (vol.grid_width / w_px, vol.grid_height / h_px)
    to_px = (w_px / vol.grid_width, h_px / vol.grid_height)
    return image_size, to_grid, to_px


def predict_target(
    vol: FeatureVolume,
    q: Point,
    query_frame: int,
    target_frame: int,
    cfg: MatchConfig,
    image_size: tuple[int, int] | None = None,
) -> tuple[Point, float]:
    """Locate pixel-space query q of frame i in frame j.

    Returns the predicted pixel position and the raw best similarity
    (the confidence used for occlusion decisions).
    """
    _, to_grid, to_px = _resolve_scale(vol, image_size)
    q_grid = Point(q.x * to_grid[0], q.y * to_grid[1])
    qfeat = sample_feature(vol, query_frame, q_grid)
    cv = cost_volume(qfeat, vol, target_frame)
    confidence = float(cv.values.max())
    hit = soft_argmax(cv, cfg)
    return Point(hit.x * to_px[0], hit.y * to_px[1]), confidence


def predict_tracklet(
    vol: FeatureVolume,
    q: Point,
    query_frame: int,
    cfg: MatchConfig,
    image_size: tuple[int, int] | None = None,
) -> Track:
    """Track one query across every frame of the volume."""
    n = vol.num_frames
    positions = np.zeros((n, 2), dtype=np.float64)
    visible = np.zeros(n, dtype=bool)
    for frame in range(n):
        p, conf = predict_target(vol, q, query_frame, frame, cfg, image_size)
        positions[frame] = (p.x, p.y)
        visible[frame] = conf >= cfg.occlusion_threshold
    return Track(query_frame=query_frame, positions=positions, visible=visible)


def track_zero_shot(
    vol: FeatureVolume,
    queries: list[tuple[Point, int]],
    cfg: MatchConfig,
    image_size: tuple[int, int] | None = None,
) -> TrackSet:
    """Track a list of (point, query_frame) queries with no training at all."""
    (h_px, w_px), _, _ = _resolve_scale(vol, image_size)
    tracks = [predict_tracklet(vol, q, frame, cfg, image_size) for q, frame in queries]
    for track in tracks:
        # The query frame self-match can fall below the threshold only for
        # adversarial features; the track contract still requires it visible.
        track.visible[track.query_frame] = True
        np.clip(track.positions[:, 0], 0.0, np.nextafter(float(w_px), 0.0), out=track.positions[:, 0])
        np.clip(track.positions[:, 1], 0.0, np.nextafter(float(h_px), 0.0), out=track.positions[:, 1])
    return TrackSet(num_frames=vol.num_frames, height=h_px, width=w_px, tracks=tracks)


@dataclass(frozen=True)
class Segment:
    """One scheduled chunk of a long video.

    Frames [start, start+length) are processed together; only frames in
    [keep_start, keep_end) are taken from this segment's output.
    """

    start: int
    length: int
    keep_start: int
    keep_end: int


def plan_segments(total_frames: int, segment_length: int) -> list[Segment]:
    """Split `total_frames` into segments of `segment_length`.

    Full segments tile from frame 0. A nonzero remainder r makes the final
    segment start at total_frames - segment_length (borrowing the tail of the
    previous segment) while keeping only its last r frames, so keep ranges
    exactly partition [0, total_frames). Videos no longer than a segment get
    a single short segment.
    """
    if total_frames < 1 or segment_length < 1:
        raise ValidationError("frame counts must be positive")
    if total_frames <= segment_length:
        return [Segment(0, total_frames, 0, total_frames)]
    full = total_frames // segment_length
    remainder = total_frames - full * segment_length
    segments = [
        Segment(i * segment_length, segment_length, i * segment_length, (i + 1) * segment_length)
        for i in range(full)
    ]
    if remainder:
        start = total_frames - segment_length
        segments.append(Segment(start, segment_length, total_frames - remainder, total_frames))
    return segments


def track_zero_shot_segmented(
    vol: FeatureVolume,
    queries: list[tuple[Point, int]],
    cfg: MatchConfig,
    segment_length: int,
    image_size: tuple[int, int] | None = None,
) -> TrackSet:
    """Zero-shot tracking with per-segment feature slices.

    Each planned segment is sliced out of the volume and treated as an
    independent encode; a frame's predictions come from the segment that
    keeps it, and each query's feature comes from the segment keeping its
    query frame.
    """
    n = vol.num_frames
    plan = plan_segments(n, segment_length)
    (h_px, w_px), to_grid, to_px = _resolve_scale(vol, image_size)
    slices = [FeatureVolume(vol.data[seg.start : seg.start + seg.length]) for seg in plan]

    def owner(frame: int) -> int:
        for s_idx, seg in enumerate(plan):
            if seg.keep_start <= frame < seg.keep_end:
                return s_idx
        raise ValidationError(f"frame {frame} not covered by the segment plan")

    tracks = []
    for q, query_frame in queries:
        q_seg = owner(query_frame)
        q_grid = Point(q.x * to_grid[0], q.y * to_grid[1])
        qfeat = sample_feature(slices[q_seg], query_frame - plan[q_seg].start, q_grid)
        positions = np.zeros((n, 2), dtype=np.float64)
        visible = np.zeros(n, dtype=bool)
        for frame in range(n):
            t_seg = owner(frame)
            cv = cost_volume(qfeat, slices[t_seg], frame - plan[t_seg].start)
            hit = soft_argmax(cv, cfg)
            positions[frame] = (hit.x * to_px[0], hit.y * to_px[1])
            visible[frame] = float(cv.values.max()) >= cfg.occlusion_threshold
        visible[query_frame] = True
        np.clip(positions[:, 0], 0.0, np.nextafter(float(w_px), 0.0), out=positions[:, 0])
        np.clip(positions[:, 1], 0.0, np.nextafter(float(h_px), 0.0), out=positions[:, 1])
        tracks.append(Track(query_frame=query_frame, positions=positions, visible=visible))
    return TrackSet(num_frames=n, height=h_px, width=w_px, tracks=tracks)
