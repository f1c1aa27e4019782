"""Synthetic scenes with exact ground truth.

Scenes are rigid sprites (discs, boxes) translating over a panning
background. Everything downstream of the geometry is closed-form: flow
fields are the velocity of the visible surface at each pixel, tracks are
rigid-motion positions with geometric occlusion flags, and ideal features
give every material point a feature vector that never changes along its
track. That makes tracker and loss behavior a correctness statement
instead of a benchmark guess.

Feature distinctness is enforced by rejection sampling: unit vectors are
redrawn until the maximum pairwise cosine is below a cap, which bounds
impostor similarity (argmax margin, occlusion detectability) and the
clamped soft-argmax drag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import FeatureVolume, FlowPyramid, Point, Track, TrackSet, ValidationError

BACKGROUND = -1


@dataclass(frozen=True)
class SpriteSpec:
    kind: str  # "disc" | "box"
    center: tuple[float, float]  # (x, y) at frame 0
    size: tuple[float, float]  # (radius, radius) for discs, half extents for boxes
    velocity: tuple[float, float]  # px per frame
    layer: int  # higher layers occlude lower ones; background is lowest

    def __post_init__(self) -> None:
        if self.kind not in ("disc", "box"):
            raise ValidationError(f"unknown sprite kind {self.kind!r}")
        if min(self.size) <= 0:
            raise ValidationError("sprite size must be positive")


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    num_frames: int
    pan: tuple[float, float] = (0.0, 0.0)
    sprites: tuple = ()
    seed_stride: int = 4

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1 or self.num_frames < 1:
            raise ValidationError("scene dimensions must be positive")
        if self.seed_stride < 1:
            raise ValidationError("seed_stride must be at least 1")
        layers = [s.layer for s in self.sprites]
        if len(set(layers)) != len(layers):
            raise ValidationError("sprite layers must be distinct")

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "num_frames": self.num_frames,
            "pan": list(self.pan),
            "seed_stride": self.seed_stride,
            "sprites": [
                {
                    "kind": s.kind,
                    "center": list(s.center),
                    "size": list(s.size),
                    "velocity": list(s.velocity),
                    "layer": s.layer,
                }
                for s in self.sprites
            ],
        }

    @staticmethod
    def from_dict(obj: dict) -> "SceneSpec":
        sprites = tuple(
            SpriteSpec(
                kind=s["kind"],
                center=tuple(s["center"]),
                size=tuple(s["size"]),
                velocity=tuple(s["velocity"]),
                layer=int(s["layer"]),
            )
            for s in obj.get("sprites", ())
        )
        return SceneSpec(
            height=int(obj["height"]),
            width=int(obj["width"]),
            num_frames=int(obj["num_frames"]),
            pan=tuple(obj.get("pan", (0.0, 0.0))),
            sprites=sprites,
            seed_stride=int(obj.get("seed_stride", 4)),
        )


@dataclass(frozen=True)
class CorruptionSpec:
    drift_rate: float = 0.1
    noise_sigma: float = 0.05
    onset_frame: int = 1

    def __post_init__(self) -> None:
        if self.drift_rate < 0 or self.noise_sigma < 0:
            raise ValidationError("corruption magnitudes must be nonnegative")
        if self.onset_frame < 0:
            raise ValidationError("onset_frame must be nonnegative")


@dataclass
class SceneBundle:
    name: str
    spec: SceneSpec
    tracks: TrackSet
    flows: FlowPyramid
    masks: np.ndarray  # (N, H, W) bool, True on sprite pixels
    fg_area_per_frame: np.ndarray  # (N,) float64


def _sprite_center(sprite: SpriteSpec, frame: int) -> tuple[float, float]:
    return (
        sprite.center[0] + frame * sprite.velocity[0],
        sprite.center[1] + frame * sprite.velocity[1],
    )


def _contains(sprite: SpriteSpec, frame: int, x, y):
    """Vectorized containment test; boundaries are inclusive."""
    cx, cy = _sprite_center(sprite, frame)
    dx = np.asarray(x, dtype=np.float64) - cx
    dy = np.asarray(y, dtype=np.float64) - cy
    if sprite.kind == "disc":
        return dx * dx + dy * dy <= sprite.size[0] ** 2
    return (np.abs(dx) <= sprite.size[0]) & (np.abs(dy) <= sprite.size[1])


def topmost(spec: SceneSpec, x, y, frame: int):
    """Index of the visible sprite at (x, y), or BACKGROUND.

    Accepts scalars or arrays; ties cannot happen because layers are
    distinct.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    best = np.full(x.shape, BACKGROUND, dtype=np.int64)
    best_layer = np.full(x.shape, np.iinfo(np.int64).min, dtype=np.int64)
    for idx, sprite in enumerate(spec.sprites):
        inside = _contains(sprite, frame, x, y)
        take = inside & (sprite.layer > best_layer)
        best[take] = idx
        best_layer[take] = np.where(take, sprite.layer, best_layer)[take]
    return best


def _surface_velocity(spec: SceneSpec, surface: np.ndarray) -> np.ndarray:
    """(..., 2) velocity for each surface index in `surface`."""
    vel = np.empty(surface.shape + (2,), dtype=np.float64)
    vel[..., 0] = spec.pan[0]
    vel[..., 1] = spec.pan[1]
    for idx, sprite in enumerate(spec.sprites):
        sel = surface == idx
        vel[sel, 0] = sprite.velocity[0]
        vel[sel, 1] = sprite.velocity[1]
    return vel


def render_scene(spec: SceneSpec, name: str = "scene") -> SceneBundle:
    """Exact ground truth for a scene: tracks, flows, masks, areas.

    Forward flow at a pixel is the velocity of whatever surface is visible
    there; backward flow is minus the velocity of the surface visible in
    the later frame. On co-visible points the two are exact inverses.
    Tracks seed a regular grid on frame 0 and attach to the surface
    visible under each seed; a track is visible while its material point
    stays the topmost surface at its position and inside the canvas.
    """
    h, w, n = spec.height, spec.width, spec.num_frames
    ys, xs = np.mgrid[0:h, 0:w]
    surf = np.stack([topmost(spec, xs, ys, f) for f in range(n)])  # (N, H, W)
    masks = surf != BACKGROUND
    fg_area = masks.reshape(n, -1).sum(axis=1).astype(np.float64)

    vel = np.stack([_surface_velocity(spec, surf[f]) for f in range(n)])
    forward = vel[:-1].astype(np.float32)
    backward = (-vel[1:]).astype(np.float32)
    flows = FlowPyramid(forward, backward)

    tracks = []
    for sy in range(0, h, spec.seed_stride):
        for sx in range(0, w, spec.seed_stride):
            owner = int(topmost(spec, float(sx), float(sy), 0))
            if owner == BACKGROUND:
                v = spec.pan
            else:
                v = spec.sprites[owner].velocity
            positions = np.zeros((n, 2), dtype=np.float64)
            visible = np.zeros(n, dtype=bool)
            for f in range(n):
                px = sx + f * v[0]
                py = sy + f * v[1]
                positions[f] = (px, py)
                if not (0 <= px < w and 0 <= py < h):
                    continue
                top = int(topmost(spec, px, py, f))
                visible[f] = top == owner
            if not visible[0]:
                continue
            tracks.append(Track(query_frame=0, positions=positions, visible=visible))
    track_set = TrackSet(num_frames=n, height=h, width=w, tracks=tracks)
    return SceneBundle(name=name, spec=spec, tracks=track_set, flows=flows, masks=masks, fg_area_per_frame=fg_area)


def _reject_similar(vectors: np.ndarray, max_cos: float, rng, max_rounds: int = 80) -> np.ndarray:
    """Redraw unit rows until every pairwise cosine is at or below max_cos."""
    m = vectors.shape[0]
    if m < 2:
        return vectors
    for _ in range(max_rounds):
        gram = vectors @ vectors.T
        np.fill_diagonal(gram, -1.0)
        bad_rows = np.unique(np.nonzero(np.triu(gram > max_cos))[1])
        if bad_rows.size == 0:
            return vectors
        fresh = rng.standard_normal((bad_rows.size, vectors.shape[1]))
        fresh /= np.linalg.norm(fresh, axis=1, keepdims=True)
        vectors[bad_rows] = fresh
    raise ValidationError(
        f"could not reach pairwise cosine <= {max_cos} for {m} vectors in {vectors.shape[1]} channels; "
        "raise the channel count or the cap"
    )


def ideal_features(
    spec: SceneSpec,
    channels: int,
    cell_size: int = 1,
    max_cos: float = 0.45,
    seed: int = 0,
) -> FeatureVolume:
    """Features constant along ground-truth tracks, pairwise-distinct.

    The feature grid is the canvas downsampled by cell_size (which must
    divide both extents); grid node (r, c) of frame f carries the feature
    of the material point of the surface visible at pixel
    (c * cell_size, r * cell_size). Material identity is the frame-0
    position of that point, so motion that lands cells on cells makes the
    same vector recur across frames; the benchmark factories choose such
    motion. Fewer than 2 channels cannot carry distinct directions and is
    rejected.
    """
    if channels < 2:
        raise ValidationError("need at least 2 channels for distinct features")
    if spec.height % cell_size or spec.width % cell_size:
        raise ValidationError(f"cell_size {cell_size} must divide the canvas {spec.height}x{spec.width}")
    hg = spec.height // cell_size
    wg = spec.width // cell_size
    n = spec.num_frames
    rng = np.random.default_rng(seed)

    ys, xs = np.mgrid[0:hg, 0:wg]
    px = xs * cell_size
    py = ys * cell_size
    material_of_cell = np.zeros((n, hg, wg), dtype=np.int64)
    material_index: dict[tuple, int] = {}
    for f in range(n):
        surf = topmost(spec, px, py, f)
        vel = _surface_velocity(spec, surf)
        mx = np.round(px - f * vel[..., 0], 6)
        my = np.round(py - f * vel[..., 1], 6)
        for r in range(hg):
            for c in range(wg):
                key = (int(surf[r, c]), float(mx[r, c]), float(my[r, c]))
                idx = material_index.get(key)
                if idx is None:
                    idx = len(material_index)
                    material_index[key] = idx
                material_of_cell[f, r, c] = idx

    vectors = rng.standard_normal((len(material_index), channels))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    vectors = _reject_similar(vectors, max_cos, rng)
    # Norm sqrt(C) puts single components at O(1). Cosine matching never
    # sees the scale, but anything trained on these features does.
    vectors *= np.sqrt(channels)
    data = vectors[material_of_cell.reshape(-1)].reshape(n, hg, wg, channels)
    return FeatureVolume(data.astype(np.float32))


def corrupt_features(vol: FeatureVolume, corruption: CorruptionSpec, seed: int = 0) -> FeatureVolume:
    """Progressive per-frame drift plus noise, starting at onset_frame.

    The second half of the channel space is blended toward a random
    rotation of itself, with the blend factor growing linearly per frame
    after onset (clamped at 1), and Gaussian noise is added on that half.
    The first half stays clean, so recovery is learnable but not free.
    Zero drift and zero noise return the volume unchanged.
    """
    if corruption.drift_rate == 0.0 and corruption.noise_sigma == 0.0:
        return FeatureVolume(vol.data.copy())
    n, h, w, c = vol.data.shape
    half = c // 2
    if half < 2:
        raise ValidationError("corruption needs at least 4 channels to split a drift subspace")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((c - half, c - half)))
    data = vol.data.astype(np.float64)
    out = data.copy()
    for f in range(corruption.onset_frame, n):
        alpha = min(1.0, corruption.drift_rate * (f - corruption.onset_frame + 1))
        block = data[f, :, :, half:]
        rotated = block @ q.T
        noisy = (1.0 - alpha) * block + alpha * rotated
        noisy = noisy + corruption.noise_sigma * rng.standard_normal(block.shape)
        out[f, :, :, half:] = noisy
    return FeatureVolume(out.astype(np.float32))


@dataclass
class BenchmarkItem:
    bundle: SceneBundle
    features: FeatureVolume
    corrupted: FeatureVolume | None = None
    cell_size: int = 1


def _random_tracking_scene(rng, height: int, width: int, num_frames: int) -> SceneSpec:
    def ivel(lo=-2, hi=2):
        return (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))

    sprites = []
    count = int(rng.integers(2, 4))
    for layer in range(count):
        kind = "disc" if rng.random() < 0.5 else "box"
        size = float(rng.integers(4, 8))
        cx = float(rng.integers(6, width - 6))
        cy = float(rng.integers(6, height - 6))
        sprites.append(
            SpriteSpec(
                kind=kind,
                center=(cx, cy),
                size=(size, size if kind == "disc" else float(rng.integers(3, 7))),
                velocity=ivel(),
                layer=layer,
            )
        )
    pan = (int(rng.integers(-1, 2)), int(rng.integers(-1, 2)))
    return SceneSpec(
        height=height,
        width=width,
        num_frames=num_frames,
        pan=pan,
        sprites=tuple(sprites),
        seed_stride=4,
    )


def _random_training_scene(rng, height: int, width: int, num_frames: int, cell: int) -> SceneSpec:
    """A scene whose motion and geometry live on the feature-cell lattice."""
    if height // cell < 5 or width // cell < 5:
        raise ValidationError(
            f"training scenes need a grid of at least 5x5 cells, got {height // cell}x{width // cell}"
        )

    def cvel():
        return (int(rng.integers(-1, 2)) * cell, int(rng.integers(-1, 2)) * cell)

    sprites = []
    for layer in range(int(rng.integers(1, 3))):
        kind = "disc" if rng.random() < 0.5 else "box"
        size = float(rng.integers(2, 4) * cell)
        cx = float(rng.integers(2, width // cell - 2) * cell)
        cy = float(rng.integers(2, height // cell - 2) * cell)
        vx, vy = cvel()
        if vx == 0 and vy == 0:
            vx = cell
        sprites.append(
            SpriteSpec(
                kind=kind,
                center=(cx, cy),
                size=(size, size if kind == "disc" else float(rng.integers(2, 4) * cell)),
                velocity=(vx, vy),
                layer=layer,
            )
        )
    return SceneSpec(
        height=height,
        width=width,
        num_frames=num_frames,
        pan=cvel(),
        sprites=tuple(sprites),
        seed_stride=cell,
    )


def _occluded_samples(bundle: SceneBundle) -> int:
    vis = bundle.tracks.visible_array()
    return int((~vis).sum())


def make_benchmark(
    n_scenes: int,
    seed: int = 0,
    kind: str = "tracking",
    channels: int | None = None,
    height: int | None = None,
    width: int | None = None,
    num_frames: int = 8,
    cell_size: int | None = None,
    corruption: CorruptionSpec | None = None,
) -> list[BenchmarkItem]:
    """Deterministic benchmark scenes with features.

    kind "tracking": pixel-resolution feature grids, integer velocities,
    every scene guaranteed to contain occluded samples; for zero-shot
    tracker validation. kind "training": coarser grids plus a corrupted
    copy of each volume, for refiner training runs.
    """
    if kind not in ("tracking", "training"):
        raise ValidationError(f"unknown benchmark kind {kind!r}")
    rng = np.random.default_rng(seed)
    items = []
    if kind == "tracking":
        channels = channels or 64
        cell_size = cell_size or 1
        height = height or 28
        width = width or 40
        for s_idx in range(n_scenes):
            for _attempt in range(64):
                spec = _random_tracking_scene(rng, height, width, num_frames)
                bundle = render_scene(spec, name=f"track{s_idx:02d}")
                if _occluded_samples(bundle) > 0:
                    break
            else:
                raise ValidationError("could not draw a scene with occlusions")
            feats = ideal_features(spec, channels, cell_size, max_cos=0.45, seed=int(rng.integers(2**31)))
            items.append(BenchmarkItem(bundle=bundle, features=feats, cell_size=cell_size))
        return items
    channels = channels or 32
    cell_size = cell_size or 4
    height = height or 12 * cell_size
    width = width or 20 * cell_size
    corruption = corruption or CorruptionSpec(drift_rate=0.25, noise_sigma=0.1, onset_frame=1)
    for s_idx in range(n_scenes):
        spec = _random_training_scene(rng, height, width, num_frames, cell_size)
        bundle = render_scene(spec, name=f"train{s_idx:02d}")
        feats = ideal_features(spec, channels, cell_size, max_cos=0.6, seed=int(rng.integers(2**31)))
        bad = corrupt_features(feats, corruption, seed=int(rng.integers(2**31)))
        items.append(BenchmarkItem(bundle=bundle, features=feats, corrupted=bad, cell_size=cell_size))
    return items
