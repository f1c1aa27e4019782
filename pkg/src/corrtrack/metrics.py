"""Tracking metrics: position accuracy, occlusion accuracy, Jaccard, and
segment-scaled variants.

Predictions and ground truth are TrackSets with matching track order.
Distances are pixels at the native track resolution unless the config
turns on the 256x256 evaluation rescale. Threshold comparisons are
inclusive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import TrackSet, ValidationError

DEFAULT_THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple = DEFAULT_THRESHOLDS
    rescale_to_256: bool = False

    def __post_init__(self) -> None:
        if not self.thresholds:
            raise ValidationError("need at least one threshold")
        if any(t <= 0 for t in self.thresholds):
            raise ValidationError("thresholds must be positive")


@dataclass
class EvalReport:
    delta_per_threshold: dict
    delta_avg: float
    occlusion_accuracy: float
    average_jaccard: float
    delta_3px: float
    delta_seg: float | None
    num_tracks: int
    num_frames: int
    num_visible_samples: int

    def to_dict(self) -> dict:
        return {
            "delta_per_threshold": {str(k): v for k, v in self.delta_per_threshold.items()},
            "delta_avg": self.delta_avg,
            "occlusion_accuracy": self.occlusion_accuracy,
            "average_jaccard": self.average_jaccard,
            "delta_3px": self.delta_3px,
            "delta_seg": self.delta_seg,
            "num_tracks": self.num_tracks,
            "num_frames": self.num_frames,
            "num_visible_samples": self.num_visible_samples,
        }

    def to_json(self, meta: dict | None = None) -> str:
        obj = self.to_dict()
        if meta is not None:
            obj["meta"] = meta
        return json.dumps(obj, indent=1, sort_keys=True)

    @staticmethod
    def csv_header() -> str:
        names = ["video", "delta_avg"]
        names += [f"delta_{g:g}" for g in DEFAULT_THRESHOLDS]
        names += ["occlusion_accuracy", "average_jaccard", "delta_3px", "delta_seg", "num_visible_samples"]
        return ",".join(names)

    def csv_row(self, video: str) -> str:
        cells = [video, repr(self.delta_avg)]
        for g in DEFAULT_THRESHOLDS:
            cells.append(repr(self.delta_per_threshold.get(g, float("nan"))))
        cells += [
            repr(self.occlusion_accuracy),
            repr(self.average_jaccard),
            repr(self.delta_3px),
            "" if self.delta_seg is None else repr(self.delta_seg),
            str(self.num_visible_samples),
        ]
        return ",".join(cells)


def _aligned_arrays(pred: TrackSet, gt: TrackSet, rescale: bool):
    if len(pred.tracks) != len(gt.tracks):
        raise ValidationError(
            f"track-count mismatch: prediction has {len(pred.tracks)}, ground truth has {len(gt.tracks)}"
        )
    if pred.num_frames != gt.num_frames:
        raise ValidationError(
            f"frame-count mismatch: prediction has {pred.num_frames}, ground truth has {gt.num_frames}"
        )
    p = pred.positions_array()
    g = gt.positions_array()
    pv = pred.visible_array()
    gv = gt.visible_array()
    if rescale:
        p = p * np.array([256.0 / pred.width, 256.0 / pred.height])
        g = g * np.array([256.0 / gt.width, 256.0 / gt.height])
    err = np.linalg.norm(p - g, axis=2)  # (T, N)
    return err, pv, gv


def position_accuracy(pred: TrackSet, gt: TrackSet, cfg: EvalConfig | None = None) -> dict:
    """Fraction of ground-truth-visible samples within each threshold."""
    cfg = cfg or EvalConfig()
    err, _, gv = _aligned_arrays(pred, gt, cfg.rescale_to_256)
    denom = int(gv.sum())
    if denom == 0:
        raise ValidationError("no ground-truth-visible samples to score")
    vis_err = err[gv]
    return {float(t): float((vis_err <= t).sum() / denom) for t in cfg.thresholds}


def occlusion_accuracy(pred: TrackSet, gt: TrackSet) -> float:
    """Fraction of all (track, frame) samples whose visibility flags agree."""
    _, pv, gv = _aligned_arrays(pred, gt, False)
    if pv.size == 0:
        raise ValidationError("no samples to score")
    return float((pv == gv).mean())


def jaccard_at(pred: TrackSet, gt: TrackSet, threshold: float, cfg: EvalConfig | None = None) -> float:
    """Jaccard of one threshold: TP / (TP + FP + FN).

    TP: gt-visible, predicted visible, within the threshold.
    FP: predicted visible but gt-occluded, or visible yet too far.
    FN: gt-visible but predicted occluded, or predicted too far.
    """
    cfg = cfg or EvalConfig()
    err, pv, gv = _aligned_arrays(pred, gt, cfg.rescale_to_256)
    within = err <= threshold
    tp = int((gv & pv & within).sum())
    fp = int((pv & (~gv | ~within)).sum())
    fn = int((gv & (~pv | ~within)).sum())
    denom = tp + fp + fn
    if denom == 0:
        raise ValidationError(f"no samples enter the Jaccard at threshold {threshold}")
    return tp / denom


def average_jaccard(pred: TrackSet, gt: TrackSet, cfg: EvalConfig | None = None) -> float:
    cfg = cfg or EvalConfig()
    return float(np.mean([jaccard_at(pred, gt, t, cfg) for t in cfg.thresholds]))


def badja_metrics(pred: TrackSet, gt: TrackSet, fg_area_per_frame: np.ndarray) -> tuple[float, float]:
    """Segment-scaled accuracy and the fixed 3-px accuracy.

    A gt-visible sample in frame n counts for delta_seg when its error is
    within 0.2 * sqrt(A_n), A_n the foreground area of that frame in
    pixels; delta_3px uses a flat 3 px radius. Both are inclusive.
    """
    areas = np.asarray(fg_area_per_frame, dtype=np.float64)
    if areas.shape != (gt.num_frames,):
        raise ValidationError(f"need one foreground area per frame, got shape {areas.shape}")
    if np.any(areas < 0):
        raise ValidationError("foreground areas must be nonnegative")
    err, _, gv = _aligned_arrays(pred, gt, False)
    denom = int(gv.sum())
    if denom == 0:
        raise ValidationError("no ground-truth-visible samples to score")
    radius = 0.2 * np.sqrt(areas)[None, :]  # (1, N) broadcast over tracks
    seg = float(((err <= radius) & gv).sum() / denom)
    px3 = float(((err <= 3.0) & gv).sum() / denom)
    return seg, px3


def evaluate(
    pred: TrackSet,
    gt: TrackSet,
    cfg: EvalConfig | None = None,
    fg_area_per_frame: np.ndarray | None = None,
) -> EvalReport:
    """All metrics in one report. delta_seg needs per-frame areas."""
    cfg = cfg or EvalConfig()
    delta = position_accuracy(pred, gt, cfg)
    oa = occlusion_accuracy(pred, gt)
    aj = average_jaccard(pred, gt, cfg)
    err, _, gv = _aligned_arrays(pred, gt, False)
    px3 = float(((err <= 3.0) & gv).sum() / int(gv.sum()))
    seg = None
    if fg_area_per_frame is not None:
        seg, px3 = badja_metrics(pred, gt, fg_area_per_frame)
    return EvalReport(
        delta_per_threshold=delta,
        delta_avg=float(np.mean(list(delta.values()))),
        occlusion_accuracy=oa,
        average_jaccard=aj,
        delta_3px=px3,
        delta_seg=seg,
        num_tracks=len(gt.tracks),
        num_frames=gt.num_frames,
        num_visible_samples=int(gv.sum()),
    )
