"""Track construction by chaining frame-to-frame flow fields.

Positions advect through bilinear samples of the forward fields; each step
must survive a forward-backward cycle check, and once a step fails the
track stays not-visible for the rest of that direction (occlusion is never
re-acquired). Thresholds are calibrated at a 320x576 canvas and scale
linearly with the image diagonal by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import FlowPyramid, Point, Track, TrackSet, ValidationError
from .matching import bilinear_weights

REFERENCE_DIAG = math.hypot(320.0, 576.0)


@dataclass(frozen=True)
class Seed:
    point: Point
    frame: int
    is_foreground: bool = False


def advect(p: Point, field: np.ndarray) -> Point:
    """Move a point by the bilinearly sampled flow under it.

    field is (H, W, 2) with (dx, dy) last; p must lie inside
    [0, W) x [0, H).
    """
    field = np.asarray(field)
    h, w = field.shape[:2]
    rows, cols, weights = bilinear_weights(p.x, p.y, h, w)
    flow = weights @ field[rows, cols, :].astype(np.float64)
    return Point(p.x + float(flow[0]), p.y + float(flow[1]))


def _scale_factor(height: int, width: int, scale_thresholds: bool) -> float:
    if not scale_thresholds:
        return 1.0
    return math.hypot(float(height), float(width)) / REFERENCE_DIAG


def _in_bounds(x: float, y: float, height: int, width: int) -> bool:
    return 0.0 <= x < width and 0.0 <= y < height


def chain_tracks(
    flows: FlowPyramid,
    seeds,
    cyc_fwd_thresh: float = 1.5,
    reject_dist: float = 2.0,
    scale_thresholds: bool = True,
    apply_long_range_filter: bool = False,
) -> TrackSet:
    """Chain every seed through the flow pyramid in both time directions.

    A step from frame a to its neighbor b advects the current position,
    then advects the result back with the opposite field; the step counts
    as visible only if the round trip lands within cyc_fwd_thresh px and
    the new position stays inside the canvas. After a failure the position
    is frozen and the remaining frames in that direction are not-visible.

    reject_dist only matters when apply_long_range_filter is set; see
    long_range_reject.
    """
    h, w = flows.height, flows.width
    n = flows.num_frames
    factor = _scale_factor(h, w, scale_thresholds)
    cyc = cyc_fwd_thresh * factor
    tracks = []
    for seed in seeds:
        if isinstance(seed, Seed):
            point, frame = seed.point, seed.frame
        else:
            point, frame = seed
        if not 0 <= frame < n:
            raise ValidationError(f"seed frame {frame} out of range [0, {n})")
        if not _in_bounds(point.x, point.y, h, w):
            raise ValidationError(f"seed ({point.x}, {point.y}) outside the canvas")
        positions = np.zeros((n, 2), dtype=np.float64)
        visible = np.zeros(n, dtype=bool)
        positions[frame] = (point.x, point.y)
        visible[frame] = True

        cur = point
        alive = True
        for f in range(frame, n - 1):
            if alive:
                nxt = advect(cur, flows.forward[f])
                ok = _in_bounds(nxt.x, nxt.y, h, w)
                if ok:
                    back = advect(nxt, flows.backward[f])
                    ok = math.hypot(back.x - cur.x, back.y - cur.y) <= cyc
                if ok:
                    cur = nxt
                else:
                    alive = False
            positions[f + 1] = (cur.x, cur.y)
            visible[f + 1] = alive

        cur = point
        alive = True
        for f in range(frame, 0, -1):
            if alive:
                prv = advect(cur, flows.backward[f - 1])
                ok = _in_bounds(prv.x, prv.y, h, w)
                if ok:
                    fwd = advect(prv, flows.forward[f - 1])
                    ok = math.hypot(fwd.x - cur.x, fwd.y - cur.y) <= cyc
                if ok:
                    cur = prv
                else:
                    alive = False
            positions[f - 1] = (cur.x, cur.y)
            visible[f - 1] = alive

        tracks.append(Track(query_frame=frame, positions=positions, visible=visible))
    out = TrackSet(num_frames=n, height=h, width=w, tracks=tracks)
    if apply_long_range_filter:
        out = long_range_reject(out, flows, reject_dist, cyc_fwd_thresh, scale_thresholds)
    return out


def long_range_reject(
    tracks: TrackSet,
    flows: FlowPyramid,
    reject_dist: float = 2.0,
    cyc_fwd_thresh: float = 1.5,
    scale_thresholds: bool = True,
) -> TrackSet:
    """Optional pairwise rejection against direct one-hop advection.

    For adjacent visible frames, the recorded position at the far end is
    compared with advecting the near end directly; a discrepancy of at
    least reject_dist px (while the direct hop itself is cycle-consistent
    within cyc_fwd_thresh) marks the far end, and everything beyond it on
    that side of the query frame, not-visible. On tracks freshly produced
    by chain_tracks the recorded position is the direct hop, so this is a
    no-op there; it exists for tracks from other sources.
    """
    h, w = tracks.height, tracks.width
    factor = _scale_factor(h, w, scale_thresholds)
    reject = reject_dist * factor
    cyc = cyc_fwd_thresh * factor
    out_tracks = []
    for track in tracks.tracks:
        visible = track.visible.copy()
        qf = track.query_frame
        for f in range(qf, tracks.num_frames - 1):
            if not (visible[f] and visible[f + 1]):
                continue
            a = Point(*track.positions[f])
            direct = advect(a, flows.forward[f])
            if not _in_bounds(direct.x, direct.y, h, w):
                continue
            back = advect(direct, flows.backward[f])
            consistent = math.hypot(back.x - a.x, back.y - a.y) <= cyc
            gap = math.hypot(track.positions[f + 1, 0] - direct.x, track.positions[f + 1, 1] - direct.y)
            if consistent and gap >= reject:
                visible[f + 1 :] = False
                break
        for f in range(qf, 0, -1):
            if not (visible[f] and visible[f - 1]):
                continue
            a = Point(*track.positions[f])
            direct = advect(a, flows.backward[f - 1])
            if not _in_bounds(direct.x, direct.y, h, w):
                continue
            fwd = advect(direct, flows.forward[f - 1])
            consistent = math.hypot(fwd.x - a.x, fwd.y - a.y) <= cyc
            gap = math.hypot(track.positions[f - 1, 0] - direct.x, track.positions[f - 1, 1] - direct.y)
            if consistent and gap >= reject:
                visible[:f] = False
                break
        out_tracks.append(Track(track.query_frame, track.positions.copy(), visible))
    return TrackSet(num_frames=tracks.num_frames, height=h, width=w, tracks=out_tracks)


def seeds_from_grid(
    height: int,
    width: int,
    stride: int,
    mask: np.ndarray | None = None,
    query_frame: int = 0,
) -> list[Seed]:
    """Regular grid of seeds on pixel centers, every `stride` pixels.

    With a (H, W) boolean mask, seeds landing on true pixels are flagged
    foreground. A stride larger than the canvas still yields the (0, 0)
    seed.
    """
    if stride < 1:
        raise ValidationError("stride must be at least 1")
    seeds = []
    for y in range(0, height, stride):
        for x in range(0, width, stride):
            fg = bool(mask[y, x]) if mask is not None else False
            seeds.append(Seed(Point(float(x), float(y)), query_frame, fg))
    return seeds
