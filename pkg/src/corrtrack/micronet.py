"""A small trainable refiner grafted onto a toy backbone.

The refiner is an 8-layer conv stack (3x3, stride 1, same padding, ReLU
after every layer) initialized to the exact identity: zero kernels except
a center tap of 1 on matching channels, zero bias. Its output rejoins the
backbone through a zero-initialized 1x1 conv, so at initialization the
whole splice is invisible to the backbone:

    routed = h + zero_conv(stop_gradient(refiner(h)))

The stop-gradient is structural: the reconstruction loss reaches the
zero conv but never the refiner, and the correspondence loss reaches the
refiner (and optionally the backbone below the tap) but never the zero
conv. All backprop here is written by hand; no autodiff anywhere.

Everything runs in float64. ReLU's subgradient at 0 is taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CorrespondenceSet, CorrtrackError, FeatureVolume, TrackSet, ValidationError, write_checkpoint, read_checkpoint
from .corrloss import LossConfig, corr_loss, corr_loss_value, sample_pairs
from .matching import MatchConfig, predict_target


class TrainingError(CorrtrackError):
    """A training step produced something unusable (non-finite loss)."""


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (K, K, C_in, C_out) float64
    bias: np.ndarray  # (C_out,) float64
    activation: str = "relu"  # "relu" | "none"

    def __post_init__(self) -> None:
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kernel.ndim != 4 or self.kernel.shape[0] != self.kernel.shape[1]:
            raise ValidationError(f"kernel must be (K, K, C_in, C_out), got {self.kernel.shape}")
        if self.kernel.shape[0] % 2 != 1:
            raise ValidationError("kernel size must be odd for same padding")
        if self.bias.shape != (self.kernel.shape[3],):
            raise ValidationError("bias length must match output channels")
        if self.activation not in ("relu", "none"):
            raise ValidationError(f"unknown activation {self.activation!r}")


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """im2col: (N, H, W, C) -> (N, H, W, K*K*C), zero padded to same size."""
    n, h, w, c = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, h, w, k * k * c), dtype=np.float64)
    slot = 0
    for dy in range(k):
        for dx in range(k):
            cols[..., slot * c : (slot + 1) * c] = xp[:, dy : dy + h, dx : dx + w, :]
            slot += 1
    return cols


def conv_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    """Cross-correlation with same padding, then the layer's activation."""
    x = np.asarray(x, dtype=np.float64)
    k, _, c_in, c_out = layer.kernel.shape
    if x.ndim != 4 or x.shape[3] != c_in:
        raise ValidationError(f"input shape {x.shape} does not feed a {c_in}-channel conv")
    cols = _patches(x, k)
    y = cols @ layer.kernel.reshape(k * k * c_in, c_out) + layer.bias
    if layer.activation == "relu":
        y = np.maximum(y, 0.0)
    return y


def conv_backward(layer: ConvLayer, x: np.ndarray, upstream: np.ndarray):
    """Gradients of a conv layer; recomputes the forward internals from x.

    Returns (grad_input, grad_kernel, grad_bias). The ReLU mask uses the
    strict pre-activation sign, so the subgradient at exactly 0 is 0.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    k, _, c_in, c_out = layer.kernel.shape
    n, h, w, _ = x.shape
    cols = _patches(x, k)
    kmat = layer.kernel.reshape(k * k * c_in, c_out)
    if layer.activation == "relu":
        pre = cols @ kmat + layer.bias
        upstream = upstream * (pre > 0.0)
    up_flat = upstream.reshape(-1, c_out)
    grad_kernel = (cols.reshape(-1, k * k * c_in).T @ up_flat).reshape(layer.kernel.shape)
    grad_bias = up_flat.sum(axis=0)
    grad_cols = upstream @ kmat.T  # (N, H, W, K*K*C_in)
    pad = k // 2
    grad_xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c_in), dtype=np.float64)
    slot = 0
    for dy in range(k):
        for dx in range(k):
            grad_xp[:, dy : dy + h, dx : dx + w, :] += grad_cols[..., slot * c_in : (slot + 1) * c_in]
            slot += 1
    grad_input = grad_xp[:, pad : pad + h, pad : pad + w, :] if pad else grad_xp
    return grad_input, grad_kernel, grad_bias


def identity_conv(channels: int, ksize: int = 3, activation: str = "relu") -> ConvLayer:
    """Zero kernel except a center tap of 1 per channel; zero bias.

    With ReLU this is the exact identity on nonnegative inputs.
    """
    kernel = np.zeros((ksize, ksize, channels, channels), dtype=np.float64)
    mid = ksize // 2
    for c in range(channels):
        kernel[mid, mid, c, c] = 1.0
    return ConvLayer(kernel=kernel, bias=np.zeros(channels), activation=activation)


def zero_conv(c_in: int, c_out: int) -> ConvLayer:
    """1x1 conv with all-zero kernel and bias; the splice gate."""
    return ConvLayer(
        kernel=np.zeros((1, 1, c_in, c_out), dtype=np.float64),
        bias=np.zeros(c_out, dtype=np.float64),
        activation="none",
    )


def refiner_init(channels: int, depth: int = 8, ksize: int = 3) -> list[ConvLayer]:
    """The refiner stack at identity initialization."""
    if depth < 1:
        raise ValidationError("refiner depth must be at least 1")
    return [identity_conv(channels, ksize) for _ in range(depth)]


def refiner_forward(layers: list[ConvLayer], h: np.ndarray, want_cache: bool = False):
    """Run the refiner; optionally return each layer's input for backprop."""
    inputs = []
    cur = np.asarray(h, dtype=np.float64)
    for layer in layers:
        if want_cache:
            inputs.append(cur)
        cur = conv_forward(layer, cur)
    if want_cache:
        return cur, inputs
    return cur


def refiner_backward(layers: list[ConvLayer], inputs: list[np.ndarray], upstream: np.ndarray):
    """Backprop through the cached refiner pass.

    Returns (per-layer (grad_kernel, grad_bias) list, grad wrt the tap).
    """
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    cur = upstream
    for idx in range(len(layers) - 1, -1, -1):
        cur, gk, gb = conv_backward(layers[idx], inputs[idx], cur)
        grads[idx] = (gk, gb)
    return grads, cur


def route(h: np.ndarray, refiner: list[ConvLayer], zero: ConvLayer):
    """The splice: h + zero_conv(refiner(h)). Returns (routed, refined)."""
    refined = refiner_forward(refiner, h)
    return h + conv_forward(zero, refined), refined


@dataclass
class Model:
    """Toy backbone with the refiner spliced at its tap.

    backbone_pre feeds the tap; backbone_mid and backbone_head consume the
    routed stream and reconstruct the input space.
    """

    backbone_pre: ConvLayer
    backbone_mid: ConvLayer
    backbone_head: ConvLayer
    refiner: list[ConvLayer]
    zero: ConvLayer

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in (
            ("backbone.pre", self.backbone_pre),
            ("backbone.mid", self.backbone_mid),
            ("backbone.head", self.backbone_head),
        ):
            out[f"{name}.kernel"] = layer.kernel
            out[f"{name}.bias"] = layer.bias
        for idx, layer in enumerate(self.refiner):
            out[f"refiner.{idx}.kernel"] = layer.kernel
            out[f"refiner.{idx}.bias"] = layer.bias
        out["zero.kernel"] = self.zero.kernel
        out["zero.bias"] = self.zero.bias
        return out


def model_init(channels: int, depth: int = 8, ksize: int = 3, seed: int = 0) -> Model:
    """Backbone pre-tap at identity, small random mid/head, identity
    refiner, zeroed splice. With nonnegative input the tap equals the
    input exactly at this initialization."""
    rng = np.random.default_rng(seed)
    mid = ConvLayer(
        kernel=0.05 * rng.standard_normal((ksize, ksize, channels, channels)),
        bias=np.zeros(channels),
        activation="relu",
    )
    head = ConvLayer(
        kernel=0.05 * rng.standard_normal((ksize, ksize, channels, channels)),
        bias=np.zeros(channels),
        activation="none",
    )
    return Model(
        backbone_pre=identity_conv(channels, ksize),
        backbone_mid=mid,
        backbone_head=head,
        refiner=refiner_init(channels, depth, ksize),
        zero=zero_conv(channels, channels),
    )


def save_checkpoint(path, model: Model) -> None:
    write_checkpoint(path, model.named_params())


def load_checkpoint(path) -> Model:
    tensors = read_checkpoint(path)
    try:
        depth = 1 + max(int(k.split(".")[1]) for k in tensors if k.startswith("refiner."))
        model = Model(
            backbone_pre=ConvLayer(tensors["backbone.pre.kernel"], tensors["backbone.pre.bias"], "relu"),
            backbone_mid=ConvLayer(tensors["backbone.mid.kernel"], tensors["backbone.mid.bias"], "relu"),
            backbone_head=ConvLayer(tensors["backbone.head.kernel"], tensors["backbone.head.bias"], "none"),
            refiner=[
                ConvLayer(tensors[f"refiner.{i}.kernel"], tensors[f"refiner.{i}.bias"], "relu")
                for i in range(depth)
            ],
            zero=ConvLayer(tensors["zero.kernel"], tensors["zero.bias"], "none"),
        )
    except KeyError as exc:
        raise ValidationError(f"checkpoint is missing tensor {exc}") from exc
    return model


def adamw_update(param, grad, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """One decoupled-weight-decay Adam step, in place.

    The decay multiplies the pre-update parameter by (1 - lr * wd); the
    Adam update then uses bias-corrected moments with eps added to the
    root of the second moment. With wd = 0 this is the textbook Adam step.
    """
    param *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """Named-tensor AdamW. Tensors with no gradient this step are skipped
    entirely: no moment update and no weight decay, so an untouched loss
    path leaves its parameters bit-identical."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        if lr < 0:
            raise ValidationError("learning rate must be nonnegative")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None]) -> None:
        for name in params:
            g = grads.get(name)
            if g is None:
                continue
            slot = self.state.get(name)
            if slot is None:
                slot = {"m": np.zeros_like(params[name]), "v": np.zeros_like(params[name]), "t": 0}
                self.state[name] = slot
            slot["t"] += 1
            adamw_update(
                params[name], g, slot["m"], slot["v"], slot["t"],
                self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
            )


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and routing knobs; the loss weights and pair budget live
    on the embedded LossConfig (joint = loss_diff + loss_weight * loss_corr)."""

    lr: float = 1e-3  # toy-scale default; the reference setting is 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    propagate_into_backbone: bool = True
    train_backbone: bool = True
    match: MatchConfig = field(default_factory=lambda: MatchConfig(window_radius=2.0))
    loss: LossConfig = field(default_factory=LossConfig)


def toy_backbone_forward(model: Model, noisy: np.ndarray):
    """Forward pass of the spliced model.

    Returns (recon, tap, refined, refiner_inputs, routed, mid). `refined`
    is the refiner output that the correspondence loss consumes; the
    routed stream feeds the rest of the backbone through the zero conv
    with the refiner branch detached.
    """
    tap = conv_forward(model.backbone_pre, np.asarray(noisy, dtype=np.float64))
    refined, ref_inputs = refiner_forward(model.refiner, tap, want_cache=True)
    routed = tap + conv_forward(model.zero, refined)
    mid = conv_forward(model.backbone_mid, routed)
    recon = conv_forward(model.backbone_head, mid)
    return recon, tap, refined, ref_inputs, routed, mid


def compute_grads(model: Model, batch: dict, cfg: TrainConfig) -> tuple[dict, dict]:
    """Joint loss and the routed gradient set for one batch; no update.

    batch keys: "noisy" and "clean" (N, H, W, C) arrays, "pairs"
    (CorrespondenceSet in pixel coordinates), "image_size" (H_px, W_px).
    The reconstruction loss is the mean squared error against "clean";
    the joint objective is loss_diff + loss_weight * loss_corr. Gradient
    routing follows the stop-gradient contract; see the module docstring.
    Returns (metrics, grads) with grads keyed like named_params; params a
    config excludes from training are simply absent.
    """
    noisy = np.asarray(batch["noisy"], dtype=np.float64)
    clean = np.asarray(batch["clean"], dtype=np.float64)
    pairs: CorrespondenceSet = batch["pairs"]
    image_size = batch.get("image_size")

    recon, tap, refined, ref_inputs, routed, mid = toy_backbone_forward(model, noisy)
    diff_res = recon - clean
    loss_diff = float((diff_res * diff_res).mean())
    if not np.isfinite(loss_diff):
        raise TrainingError("loss_diff is non-finite; aborting the step")

    weight = cfg.loss.loss_weight
    if weight != 0.0:
        corr = corr_loss(refined, pairs, cfg.match, cfg.loss, image_size)
        loss_corr = corr.value
    else:
        corr = None
        loss_corr = corr_loss_value(refined, pairs, cfg.match, cfg.loss, image_size)
    if not np.isfinite(loss_corr):
        raise TrainingError("loss_corr is non-finite; aborting the step")
    joint = loss_diff + weight * loss_corr

    # reconstruction path
    d_recon = (2.0 / diff_res.size) * diff_res
    d_mid, gk_head, gb_head = conv_backward(model.backbone_head, mid, d_recon)
    d_routed, gk_mid, gb_mid = conv_backward(model.backbone_mid, routed, d_mid)
    # routed = tap + zero(refined-detached): the zero conv trains, the
    # refiner branch input gradient is dropped on the floor.
    _, gk_zero, gb_zero = conv_backward(model.zero, refined, d_routed)
    d_tap = d_routed

    grads: dict[str, np.ndarray | None] = {
        "zero.kernel": gk_zero,
        "zero.bias": gb_zero,
    }
    if cfg.train_backbone:
        grads["backbone.head.kernel"] = gk_head
        grads["backbone.head.bias"] = gb_head
        grads["backbone.mid.kernel"] = gk_mid
        grads["backbone.mid.bias"] = gb_mid

    # correspondence path
    if corr is not None:
        ref_grads, d_tap_corr = refiner_backward(model.refiner, ref_inputs, weight * corr.grad_features)
        for idx, (gk, gb) in enumerate(ref_grads):
            grads[f"refiner.{idx}.kernel"] = gk
            grads[f"refiner.{idx}.bias"] = gb
        if cfg.propagate_into_backbone:
            d_tap = d_tap + d_tap_corr

    if cfg.train_backbone:
        _, gk_pre, gb_pre = conv_backward(model.backbone_pre, noisy, d_tap)
        grads["backbone.pre.kernel"] = gk_pre
        grads["backbone.pre.bias"] = gb_pre

    return {"loss_diff": loss_diff, "loss_corr": loss_corr, "joint": joint}, grads


def train_step(model: Model, optimizer: AdamW, batch: dict, cfg: TrainConfig) -> dict:
    """compute_grads followed by one optimizer step; returns the metrics."""
    metrics, grads = compute_grads(model, batch, cfg)
    optimizer.step(model.named_params(), grads)
    return metrics


@dataclass
class TrainItem:
    """One training video: corrupted input, clean target, supervision."""

    noisy: FeatureVolume
    clean: FeatureVolume
    tracks: TrackSet
    masks: np.ndarray | None = None


_MIN_KEPT_PAIRS = 8


def select_trainable_pairs(
    model: Model, item: TrainItem, pairs: CorrespondenceSet, cfg: TrainConfig
) -> CorrespondenceSet:
    """Keep the pairs the current model already resolves to within
    cfg.loss.max_pair_error pixels.

    The windowed matcher only passes gradient through cells near its own
    peak. When the true target sits outside that window, the pair's
    gradient direction is set by whatever lies at the window edge, not by
    the target, so such pairs add loss-proportional noise instead of
    signal. Dropping them keeps each step aligned with resolvable
    supervision, and the kept set widens on its own as the model
    improves. The smallest-error pairs always survive (at least 8, or
    all of them when fewer were drawn) so a bad start cannot starve
    training.
    """
    if cfg.loss.max_pair_error is None:
        return pairs
    vol = apply_refiner(model, item.noisy)
    image_size = (item.tracks.height, item.tracks.width)
    errors = []
    for pair in pairs.pairs:
        pred, _ = predict_target(
            vol, pair.query, pair.query_frame, pair.target_frame, cfg.match, image_size
        )
        errors.append(float(np.hypot(pred.x - pair.target.x, pred.y - pair.target.y)))
    keep = [p for p, e in zip(pairs.pairs, errors) if e <= cfg.loss.max_pair_error]
    if len(keep) < _MIN_KEPT_PAIRS:
        order = np.argsort(errors, kind="stable")[:_MIN_KEPT_PAIRS]
        keep = [pairs.pairs[int(i)] for i in order]
    return CorrespondenceSet(keep)


def train_refiner(
    items: list[TrainItem],
    epochs: int,
    seed: int = 0,
    cfg: TrainConfig | None = None,
    model: Model | None = None,
) -> tuple[Model, list[dict]]:
    """Train the splice on a list of items; one step per item per epoch.

    Items are visited in a seed-shuffled order each epoch; supervision
    pairs are redrawn per step from the item's co-visible track frames,
    then narrowed by select_trainable_pairs when the config asks for it.
    Returns the trained model and the per-step loss log (step, loss_diff,
    loss_corr, joint). Zero epochs returns the freshly initialized model.
    """
    if not items:
        raise ValidationError("no training items")
    cfg = cfg or TrainConfig()
    channels = items[0].noisy.channels
    for item in items:
        if item.noisy.channels != channels or item.clean.data.shape != item.noisy.data.shape:
            raise ValidationError("training items must share channel count and pair noisy/clean shapes")
    rng = np.random.default_rng(seed)
    if model is None:
        model = model_init(channels, seed=int(rng.integers(2**31)))
    optimizer = AdamW(lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    log: list[dict] = []
    step = 0
    for _epoch in range(epochs):
        order = rng.permutation(len(items))
        for item_idx in order:
            item = items[item_idx]
            pairs, _ = sample_pairs(
                item.tracks,
                item.masks,
                cfg.loss.pairs_per_step,
                cfg.loss.fg_ratio,
                seed=int(rng.integers(2**31)),
            )
            pairs = select_trainable_pairs(model, item, pairs, cfg)
            batch = {
                "noisy": item.noisy.data,
                "clean": item.clean.data,
                "pairs": pairs,
                "image_size": (item.tracks.height, item.tracks.width),
            }
            metrics = train_step(model, optimizer, batch, cfg)
            log.append({"step": step, **metrics})
            step += 1
    return model, log


def apply_refiner(model: Model, vol: FeatureVolume) -> FeatureVolume:
    """Run a feature volume through the tap and refiner of a model.

    This is the stream the correspondence loss supervises, so it is also
    the stream to track on when judging what training bought. At identity
    initialization the output equals ReLU-clipped input (exactly equal
    for nonnegative features).
    """
    tap = conv_forward(model.backbone_pre, vol.data.astype(np.float64))
    refined = refiner_forward(model.refiner, tap)
    return FeatureVolume(refined.astype(np.float32))


def loss_log_to_csv(log: list[dict]) -> str:
    lines = ["step,loss_diff,loss_corr,joint"]
    for row in log:
        lines.append(f"{row['step']},{row['loss_diff']!r},{row['loss_corr']!r},{row['joint']!r}")
    return "\n".join(lines) + "\n"
