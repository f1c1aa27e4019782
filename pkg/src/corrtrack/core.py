"""Shared domain types and on-disk formats.

Conventions used across the package:

* Coordinates are (x, y) with x = column, y = row, origin at the center of
  the top-left pixel.
* Feature grids and pixel canvases may differ in resolution; the mapping is
  the linear scaling x_grid = x_px * (W_grid / W_px) (same for y). Resampling
  lives in :mod:`corrtrack.matching`, not here.
* Binary files are little-endian with a fixed 24-byte header; payloads are
  float32. In-memory math elsewhere runs in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np


class CorrtrackError(Exception):
    """Base class for errors raised by this package."""


class FormatError(CorrtrackError):
    """A file does not look like the format it claims to be."""


class LengthError(FormatError):
    """A file's payload size disagrees with its header."""


class ValidationError(CorrtrackError):
    """A value violates a documented invariant."""


_VERSION = 1
_MAGIC_FEATURES = b"T4GF"
_MAGIC_FLOWS = b"T4GW"
_MAGIC_CHECKPOINT = b"T4GC"


@dataclass(frozen=True)
class Point:
    """A 2-D position, x = column, y = row."""

    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass
class FeatureVolume:
    """Per-frame feature maps, shape (num_frames, height, width, channels).

    Stored as float32. All entries must be finite and every dimension
    positive.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise ValidationError(
                f"feature volume must be 4-D (frames, height, width, channels), got shape {data.shape}"
            )
        if min(data.shape) < 1:
            raise ValidationError(f"feature volume has an empty dimension: {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("feature volume contains non-finite entries")
        self.data = data

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def grid_height(self) -> int:
        return self.data.shape[1]

    @property
    def grid_width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass
class Track:
    """One tracked point: query frame, per-frame positions, per-frame visibility."""

    query_frame: int
    positions: np.ndarray  # (num_frames, 2) float64, (x, y)
    visible: np.ndarray  # (num_frames,) bool

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValidationError(f"track positions must be (num_frames, 2), got {self.positions.shape}")
        if self.visible.shape != (self.positions.shape[0],):
            raise ValidationError("track visibility length does not match positions")
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("track positions contain non-finite entries")


@dataclass
class TrackSet:
    """A set of tracks over a common frame range and pixel resolution.

    Invariants: every track spans num_frames; each track is visible at its
    query frame; visible positions lie inside [0, width) x [0, height).
    """

    num_frames: int
    height: int
    width: int
    tracks: list[Track] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.num_frames < 1 or self.height < 1 or self.width < 1:
            raise ValidationError("track set dimensions must be positive")
        for t_idx, track in enumerate(self.tracks):
            if track.positions.shape[0] != self.num_frames:
                raise ValidationError(
                    f"track {t_idx} spans {track.positions.shape[0]} frames, expected {self.num_frames}"
                )
            if not 0 <= track.query_frame < self.num_frames:
                raise ValidationError(f"track {t_idx} query frame {track.query_frame} out of range")
            if not track.visible[track.query_frame]:
                raise ValidationError(f"track {t_idx} is not visible at its query frame")
            vis = track.positions[track.visible]
            if vis.size and (
                np.any(vis[:, 0] < 0)
                or np.any(vis[:, 0] >= self.width)
                or np.any(vis[:, 1] < 0)
                or np.any(vis[:, 1] >= self.height)
            ):
                raise ValidationError(f"track {t_idx} has a visible position outside the canvas")

    def positions_array(self) -> np.ndarray:
        """Stacked positions, shape (num_tracks, num_frames, 2)."""
        if not self.tracks:
            return np.zeros((0, self.num_frames, 2), dtype=np.float64)
        return np.stack([t.positions for t in self.tracks])

    def visible_array(self) -> np.ndarray:
        if not self.tracks:
            return np.zeros((0, self.num_frames), dtype=bool)
        return np.stack([t.visible for t in self.tracks])


@dataclass
class FlowPyramid:
    """Dense forward/backward flow fields between consecutive frames.

    forward[i] maps frame i -> i+1, backward[i] maps frame i+1 -> i; both are
    (num_frames - 1, height, width, 2) float32 with (dx, dy) last.
    """

    forward: np.ndarray
    backward: np.ndarray

    def __post_init__(self) -> None:
        self.forward = np.asarray(self.forward, dtype=np.float32)
        self.backward = np.asarray(self.backward, dtype=np.float32)
        for name, arr in (("forward", self.forward), ("backward", self.backward)):
            if arr.ndim != 4 or arr.shape[3] != 2:
                raise ValidationError(f"{name} flows must be (num_frames-1, height, width, 2), got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} flows contain non-finite entries")
        if self.forward.shape != self.backward.shape:
            raise ValidationError("forward and backward flow shapes differ")

    @property
    def num_frames(self) -> int:
        return self.forward.shape[0] + 1

    @property
    def height(self) -> int:
        return self.forward.shape[1]

    @property
    def width(self) -> int:
        return self.forward.shape[2]


@dataclass(frozen=True)
class Pair:
    """A supervision pair: a query point in one frame, its target in another."""

    query: Point
    query_frame: int
    target: Point
    target_frame: int
    is_foreground: bool = False


@dataclass
class CorrespondenceSet:
    pairs: list[Pair] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def validate_against(self, num_frames: int, height: int, width: int) -> None:
        """Check frame indices and point bounds against a video's extents."""
        for k, pair in enumerate(self.pairs):
            for frame in (pair.query_frame, pair.target_frame):
                if not 0 <= frame < num_frames:
                    raise ValidationError(f"pair {k} references frame {frame}, valid range is [0, {num_frames})")
            for p in (pair.query, pair.target):
                if not (0 <= p.x < width and 0 <= p.y < height):
                    raise ValidationError(f"pair {k} has point ({p.x}, {p.y}) outside [0, {width}) x [0, {height})")


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise LengthError(f"truncated {what}: wanted {count} bytes, got {len(buf)}")
    return buf


def _check_trailing(fh, what: str) -> None:
    if fh.read(1):
        raise LengthError(f"{what} has trailing bytes beyond the declared payload")


def write_feature_volume(path, vol: FeatureVolume) -> None:
    """Write a T4GF file: 24-byte header (magic, version, N, H, W, C), then
    float32 data in frame, row, column, channel order."""
    n, h, w, c = vol.data.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC_FEATURES)
        fh.write(struct.pack("<5I", _VERSION, n, h, w, c))
        fh.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())


def read_feature_volume(path) -> FeatureVolume:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "feature file header")
        if magic != _MAGIC_FEATURES:
            raise FormatError(f"bad magic {magic!r}, expected {_MAGIC_FEATURES!r}")
        version, n, h, w, c = struct.unpack("<5I", _read_exact(fh, 20, "feature file header"))
        if version != _VERSION:
            raise FormatError(f"unsupported feature file version {version}")
        if min(n, h, w, c) < 1:
            raise ValidationError(f"feature file declares an empty dimension: {(n, h, w, c)}")
        payload = _read_exact(fh, 4 * n * h * w * c, "feature payload")
        _check_trailing(fh, "feature file")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, h, w, c)
    try:
        return FeatureVolume(data.copy())
    except ValidationError as exc:
        raise FormatError(f"feature file payload is invalid: {exc}") from exc


def write_flows(path, flows: FlowPyramid) -> None:
    """Write a T4GW file: header (magic, version, N, H, W, pad), then all
    forward fields followed by all backward fields, float32."""
    n = flows.num_frames
    h, w = flows.height, flows.width
    with open(path, "wb") as fh:
        fh.write(_MAGIC_FLOWS)
        fh.write(struct.pack("<5I", _VERSION, n, h, w, 0))
        fh.write(np.ascontiguousarray(flows.forward, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(flows.backward, dtype="<f4").tobytes())


def read_flows(path) -> FlowPyramid:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "flow file header")
        if magic != _MAGIC_FLOWS:
            raise FormatError(f"bad magic {magic!r}, expected {_MAGIC_FLOWS!r}")
        version, n, h, w, _pad = struct.unpack("<5I", _read_exact(fh, 20, "flow file header"))
        if version != _VERSION:
            raise FormatError(f"unsupported flow file version {version}")
        if n < 1 or h < 1 or w < 1:
            raise ValidationError(f"flow file declares bad dimensions: {(n, h, w)}")
        per_dir = 4 * (n - 1) * h * w * 2
        fwd = _read_exact(fh, per_dir, "forward flow payload")
        bwd = _read_exact(fh, per_dir, "backward flow payload")
        _check_trailing(fh, "flow file")
    shape = (n - 1, h, w, 2)
    try:
        return FlowPyramid(
            np.frombuffer(fwd, dtype="<f4").reshape(shape).copy(),
            np.frombuffer(bwd, dtype="<f4").reshape(shape).copy(),
        )
    except ValidationError as exc:
        raise FormatError(f"flow file payload is invalid: {exc}") from exc


def tracks_to_json(tracks: TrackSet, meta: dict | None = None) -> str:
    """Serialize a TrackSet to the track-file JSON layout.

    Positions use Python's shortest round-trip float repr, which carries at
    least 9 significant digits, so read_tracks(write_tracks(t)) is exact.
    """
    obj = {
        "num_frames": tracks.num_frames,
        "height": tracks.height,
        "width": tracks.width,
        "tracks": [
            {
                "query_frame": t.query_frame,
                "positions": [[float(x), float(y)] for x, y in t.positions],
                "visible": [bool(v) for v in t.visible],
            }
            for t in tracks.tracks
        ],
    }
    if meta is not None:
        obj["meta"] = meta
    return json.dumps(obj, indent=1, sort_keys=True)


def write_tracks(path, tracks: TrackSet, meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(tracks_to_json(tracks, meta))
        fh.write("\n")


def read_tracks(path) -> TrackSet:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"track file is not valid JSON: {exc}") from exc
    try:
        tracks = [
            Track(
                query_frame=int(t["query_frame"]),
                positions=np.asarray(t["positions"], dtype=np.float64),
                visible=np.asarray(t["visible"], dtype=bool),
            )
            for t in obj["tracks"]
        ]
        return TrackSet(
            num_frames=int(obj["num_frames"]),
            height=int(obj["height"]),
            width=int(obj["width"]),
            tracks=tracks,
        )
    except KeyError as exc:
        raise FormatError(f"track file is missing key {exc}") from exc


def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write a T4GC file: named float64 tensors in insertion order."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC_CHECKPOINT)
        fh.write(struct.pack("<2I", _VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "checkpoint header")
        if magic != _MAGIC_CHECKPOINT:
            raise FormatError(f"bad magic {magic!r}, expected {_MAGIC_CHECKPOINT!r}")
        version, count = struct.unpack("<2I", _read_exact(fh, 8, "checkpoint header"))
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "tensor name"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "tensor shape"))
            size = int(np.prod(shape)) if ndim else 1
            data = _read_exact(fh, 8 * size, f"tensor {name!r} payload")
            tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
        _check_trailing(fh, "checkpoint")
    return tensors
