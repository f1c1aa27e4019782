"""Correspondence loss over feature volumes, with analytic gradients.

The loss pushes the soft-argmax prediction of each supervision pair toward
its target position: Huber of the Euclidean pixel error, averaged (or
summed) over pairs. The gradient with respect to every feature entry is
derived by hand through the chain

    bilinear sample -> cosine cost volume -> clamped windowed soft-argmax
    -> grid-to-pixel rescale -> Huber,

treating the argmax cell and the window membership as constants of the
forward pass, and the weight clamp as a subgradient that is zero at and
below the boundary. A central finite-difference checker validates the
whole thing in the tests.

Everything here runs in float64; accumulation order is pair index order,
so results are bit-stable for a fixed pair list.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CorrespondenceSet, FeatureVolume, Pair, Point, TrackSet, ValidationError
from .matching import (
    DegenerateQueryError,
    MatchConfig,
    argmax_cell,
    bilinear_weights,
    window_mask,
)


@dataclass(frozen=True)
class LossConfig:
    huber_delta: float = 1.0  # px
    loss_weight: float = 8.0  # weight of this loss in a joint objective
    pairs_per_step: int = 512
    fg_ratio: float = 0.5
    reduction: str = "mean"
    max_pair_error: float | None = None  # px; drop pairs the model misses by more, None trains on all

    def __post_init__(self) -> None:
        if self.huber_delta <= 0:
            raise ValidationError("huber_delta must be positive")
        if self.reduction not in ("mean", "sum"):
            raise ValidationError(f"unknown reduction {self.reduction!r}")
        if not 0.0 <= self.fg_ratio <= 1.0:
            raise ValidationError("fg_ratio must be within [0, 1]")
        if self.max_pair_error is not None and self.max_pair_error <= 0:
            raise ValidationError("max_pair_error must be positive when set")


@dataclass
class LossResult:
    value: float
    grad_features: np.ndarray  # float64, same shape as the feature volume
    num_pairs: int


def huber(e: float, delta: float) -> float:
    """Huber penalty of a nonnegative error magnitude."""
    if e <= delta:
        return 0.5 * e * e
    return delta * (e - 0.5 * delta)


def _huber_slope(e: float, delta: float) -> float:
    return e if e <= delta else delta


def _scales(grid_hw: tuple[int, int], image_size: tuple[int, int] | None):
    hg, wg = grid_hw
    if image_size is None:
        image_size = (hg, wg)
    h_px, w_px = image_size
    to_grid = (wg / w_px, hg / h_px)
    to_px = (w_px / wg, h_px / hg)
    return to_grid, to_px


def _pair_forward(feats: np.ndarray, pair: Pair, to_grid, to_px, mcfg: MatchConfig, delta: float):
    """Forward pass for one pair; returns (loss, cache-or-None).

    cache is None when the pair sits in the constant fallback branch (all
    window weights clamped away), where the gradient vanishes.
    """
    n, hg, wg, c = feats.shape
    gx = pair.query.x * to_grid[0]
    gy = pair.query.y * to_grid[1]
    rows, cols, bw = bilinear_weights(gx, gy, hg, wg)
    u = bw @ feats[pair.query_frame, rows, cols, :]
    nu = float(np.linalg.norm(u))
    if nu == 0.0:
        raise DegenerateQueryError(
            f"query at ({pair.query.x}, {pair.query.y}) frame {pair.query_frame} sampled a zero-norm feature"
        )
    flat = feats[pair.target_frame].reshape(hg * wg, c)
    dots = flat @ u
    norms = np.linalg.norm(flat, axis=1)
    sims = np.zeros(hg * wg, dtype=np.float64)
    ok = norms > 0.0
    sims[ok] = dots[ok] / (nu * norms[ok])
    sims2d = sims.reshape(hg, wg)
    r0, c0 = argmax_cell(sims2d)
    mask = window_mask(hg, wg, (r0, c0), mcfg.window_radius)
    weights = np.where(mask & (sims2d > 0.0), sims2d, 0.0)
    total = float(weights.sum())
    target = np.array([pair.target.x, pair.target.y], dtype=np.float64)
    if total == 0.0:
        pred = np.array([c0 * to_px[0], r0 * to_px[1]])
        res = pred - target
        return huber(float(np.linalg.norm(res)), delta), None
    ys, xs = np.nonzero(weights)
    wv = weights[ys, xs]
    xhat = float((wv * xs).sum() / total)
    yhat = float((wv * ys).sum() / total)
    pred = np.array([xhat * to_px[0], yhat * to_px[1]])
    res = pred - target
    e = float(np.linalg.norm(res))
    cache = (rows, cols, bw, u, nu, flat, norms, sims, ys, xs, wv, total, xhat, yhat, res, e)
    return huber(e, delta), cache


def _pair_backward(grad: np.ndarray, feats: np.ndarray, pair: Pair, to_px, cache, upstream: float, delta: float):
    rows, cols, bw, u, nu, flat, norms, sims, ys, xs, wv, total, xhat, yhat, res, e = cache
    if e == 0.0:
        return
    hg, wg = feats.shape[1:3]
    slope = _huber_slope(e, delta)
    d_res = upstream * slope * res / e
    gx = d_res[0] * to_px[0]
    gy = d_res[1] * to_px[1]
    # d loss / d weight for the active (positive, in-window) cells
    d_w = (gx * (xs - xhat) + gy * (ys - yhat)) / total
    # through the cosine: S = u.v / (|u||v|)
    idx = ys * wg + xs
    v = flat[idx]
    vn = norms[idx]
    s_act = sims[idx]
    uhat = u / nu
    vhat = v / vn[:, None]
    d_v = (d_w / vn)[:, None] * (uhat[None, :] - s_act[:, None] * vhat)
    tgt = grad[pair.target_frame].reshape(hg * wg, -1)
    np.add.at(tgt, idx, d_v)
    d_u = (vhat * d_w[:, None]).sum(axis=0) - float((d_w * s_act).sum()) * uhat
    d_u /= nu
    np.add.at(grad[pair.query_frame], (rows, cols), bw[:, None] * d_u[None, :])


def _as_float64(features) -> np.ndarray:
    if isinstance(features, FeatureVolume):
        return features.data.astype(np.float64)
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 4:
        raise ValidationError(f"features must be a 4-D volume, got shape {arr.shape}")
    return arr


def corr_loss(
    features,
    pairs: CorrespondenceSet,
    match_cfg: MatchConfig | None = None,
    loss_cfg: LossConfig | None = None,
    image_size: tuple[int, int] | None = None,
) -> LossResult:
    """Loss value and d(value)/d(features) for a batch of pairs.

    `features` may be a FeatureVolume or a raw (N, H, W, C) array; the
    gradient comes back as a float64 array of the same shape. Pair points
    are pixel coordinates on the `image_size` canvas (feature-grid sized
    when omitted).
    """
    match_cfg = match_cfg or MatchConfig()
    loss_cfg = loss_cfg or LossConfig()
    feats = _as_float64(features)
    if len(pairs) == 0:
        raise ValidationError("correspondence set is empty")
    n, hg, wg, _ = feats.shape
    if image_size is None:
        image_size = (hg, wg)
    pairs.validate_against(n, image_size[0], image_size[1])
    to_grid, to_px = _scales((hg, wg), image_size)
    upstream = 1.0 / len(pairs) if loss_cfg.reduction == "mean" else 1.0
    grad = np.zeros_like(feats)
    total = 0.0
    for pair in pairs.pairs:
        value, cache = _pair_forward(feats, pair, to_grid, to_px, match_cfg, loss_cfg.huber_delta)
        total += value
        if cache is not None:
            _pair_backward(grad, feats, pair, to_px, cache, upstream, loss_cfg.huber_delta)
    value = total / len(pairs) if loss_cfg.reduction == "mean" else total
    return LossResult(value=float(value), grad_features=grad, num_pairs=len(pairs))


def corr_loss_value(
    features,
    pairs: CorrespondenceSet,
    match_cfg: MatchConfig | None = None,
    loss_cfg: LossConfig | None = None,
    image_size: tuple[int, int] | None = None,
) -> float:
    """Forward-only loss; the cheap path the finite-difference checker runs."""
    match_cfg = match_cfg or MatchConfig()
    loss_cfg = loss_cfg or LossConfig()
    feats = _as_float64(features)
    if len(pairs) == 0:
        raise ValidationError("correspondence set is empty")
    n, hg, wg, _ = feats.shape
    to_grid, to_px = _scales((hg, wg), image_size)
    total = 0.0
    for pair in pairs.pairs:
        value, _ = _pair_forward(feats, pair, to_grid, to_px, match_cfg, loss_cfg.huber_delta)
        total += value
    return float(total / len(pairs)) if loss_cfg.reduction == "mean" else float(total)


def fd_gradient(fn, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function over an array.

    fn must accept an array shaped like x and return a float. O(2 * x.size)
    evaluations; test-sized inputs only.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    work = flat_x.copy()
    for k in range(flat_x.size):
        orig = work[k]
        work[k] = orig + step
        hi = fn(work.reshape(x.shape))
        work[k] = orig - step
        lo = fn(work.reshape(x.shape))
        work[k] = orig
        flat_g[k] = (hi - lo) / (2.0 * step)
    return grad


def gradient_check_clean(
    features,
    pairs: CorrespondenceSet,
    match_cfg: MatchConfig,
    image_size: tuple[int, int] | None = None,
    margin: float = 1e-2,
    min_norm: float = 0.1,
) -> bool:
    """True when no pair sits near a non-smooth point of the loss.

    Rejects argmax near-ties, any in-window similarity within `margin` of
    the clamp boundary (sign flips under perturbation), and feature cells
    so short that a finite-difference step would swing their direction.
    """
    feats = _as_float64(features)
    n, hg, wg, _ = feats.shape
    to_grid, _ = _scales((hg, wg), image_size)
    for pair in pairs.pairs:
        gx = pair.query.x * to_grid[0]
        gy = pair.query.y * to_grid[1]
        rows, cols, bw = bilinear_weights(gx, gy, hg, wg)
        u = bw @ feats[pair.query_frame, rows, cols, :]
        nu = float(np.linalg.norm(u))
        if nu < min_norm:
            return False
        flat = feats[pair.target_frame].reshape(hg * wg, -1)
        norms = np.linalg.norm(flat, axis=1)
        if float(norms.min()) < min_norm:
            return False
        sims = (flat @ u) / (nu * norms)
        top = np.sort(sims)[-2:]
        if top[1] - top[0] < margin:
            return False
        sims2d = sims.reshape(hg, wg)
        r0, c0 = argmax_cell(sims2d)
        mask = window_mask(hg, wg, (r0, c0), match_cfg.window_radius)
        if float(np.abs(sims2d[mask]).min()) < margin:
            return False
    return True


def sample_pairs(
    tracks: TrackSet,
    masks: np.ndarray | None,
    n: int,
    fg_ratio: float = 0.5,
    seed: int = 0,
    allow_same_frame: bool = False,
) -> tuple[CorrespondenceSet, float]:
    """Draw supervision pairs from co-visible track frames.

    Pairs are (track, frame a, frame b) with both ends visible; a == b is
    excluded unless allow_same_frame. A pair is foreground when the query
    point falls on a true mask pixel of its frame. Each class is sampled
    uniformly with replacement; an empty class refills from the other, and
    the achieved foreground ratio is returned alongside the set.
    """
    if n < 1:
        raise ValidationError("need at least one pair")
    combos: list[tuple[int, int, int]] = []
    fg_flags: list[bool] = []
    for t_idx, track in enumerate(tracks.tracks):
        vis_frames = np.nonzero(track.visible)[0]
        for a in vis_frames:
            for b in vis_frames:
                if a == b and not allow_same_frame:
                    continue
                combos.append((t_idx, int(a), int(b)))
                if masks is None:
                    fg_flags.append(False)
                else:
                    qx, qy = track.positions[a]
                    col = min(max(int(round(qx)), 0), tracks.width - 1)
                    row = min(max(int(round(qy)), 0), tracks.height - 1)
                    fg_flags.append(bool(masks[a, row, col]))
    if not combos:
        raise ValidationError("no co-visible frame pairs to sample from")
    flags = np.asarray(fg_flags, dtype=bool)
    fg_pool = np.nonzero(flags)[0]
    bg_pool = np.nonzero(~flags)[0]
    want_fg = int(round(n * fg_ratio))
    if fg_pool.size == 0:
        want_fg = 0
    if bg_pool.size == 0:
        want_fg = n
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    if want_fg:
        chosen.extend(fg_pool[rng.integers(0, fg_pool.size, size=want_fg)])
    if n - want_fg:
        chosen.extend(bg_pool[rng.integers(0, bg_pool.size, size=n - want_fg)])
    pairs = []
    achieved_fg = 0
    for pool_idx in chosen:
        t_idx, a, b = combos[pool_idx]
        track = tracks.tracks[t_idx]
        fg = bool(flags[pool_idx])
        achieved_fg += fg
        pairs.append(
            Pair(
                query=Point(*track.positions[a]),
                query_frame=a,
                target=Point(*track.positions[b]),
                target_frame=b,
                is_foreground=fg,
            )
        )
    return CorrespondenceSet(pairs), achieved_fg / n
