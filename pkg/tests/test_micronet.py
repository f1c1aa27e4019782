"""Conv backprop, the identity splice, AdamW, and training steps."""

import numpy as np
import pytest

from corrtrack.core import CorrespondenceSet, FeatureVolume, Pair, Point, ValidationError
from corrtrack.corrloss import LossConfig, corr_loss_value
from corrtrack.matching import MatchConfig
from corrtrack.micronet import (
    AdamW,
    ConvLayer,
    TrainConfig,
    TrainingError,
    TrainItem,
    adamw_update,
    apply_refiner,
    compute_grads,
    conv_backward,
    conv_forward,
    identity_conv,
    load_checkpoint,
    loss_log_to_csv,
    model_init,
    refiner_backward,
    refiner_forward,
    refiner_init,
    route,
    save_checkpoint,
    select_trainable_pairs,
    toy_backbone_forward,
    train_refiner,
    train_step,
    zero_conv,
)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-30)
    return np.max(np.abs(a - b)) / scale


# conv layer


def test_conv_layer_validation():
    with pytest.raises(ValidationError):
        ConvLayer(kernel=np.zeros((2, 2, 1, 1)), bias=np.zeros(1))
    with pytest.raises(ValidationError):
        ConvLayer(kernel=np.zeros((3, 3, 1, 1)), bias=np.zeros(2))
    with pytest.raises(ValidationError):
        ConvLayer(kernel=np.zeros((3, 3, 1, 1)), bias=np.zeros(1), activation="tanh")
    with pytest.raises(ValidationError):
        ConvLayer(kernel=np.zeros((3, 5, 1, 1)), bias=np.zeros(1))


def test_conv_forward_center_tap_affine():
    k = np.zeros((3, 3, 1, 1))
    k[1, 1, 0, 0] = 2.0
    layer = ConvLayer(kernel=k, bias=np.array([0.5]), activation="none")
    x = np.arange(12, dtype=np.float64).reshape(1, 3, 4, 1)
    assert np.array_equal(conv_forward(layer, x), 2.0 * x + 0.5)


def test_conv_forward_offset_tap_shifts_with_zero_pad():
    # tap at (dy=0, dx=0) reads the pixel up-left of the output position
    k = np.zeros((3, 3, 1, 1))
    k[0, 0, 0, 0] = 1.0
    layer = ConvLayer(kernel=k, bias=np.zeros(1), activation="none")
    x = np.arange(1, 10, dtype=np.float64).reshape(1, 3, 3, 1)
    y = conv_forward(layer, x)[0, :, :, 0]
    expect = np.array([[0, 0, 0], [0, 1, 2], [0, 4, 5]], dtype=np.float64)
    assert np.array_equal(y, expect)


def test_conv_forward_relu_clamps():
    k = np.zeros((1, 1, 1, 1))
    k[0, 0, 0, 0] = 1.0
    layer = ConvLayer(kernel=k, bias=np.array([-2.0]), activation="relu")
    x = np.array([[[[1.0], [5.0]]]])
    assert np.array_equal(conv_forward(layer, x), np.array([[[[0.0], [3.0]]]]))


def _smooth_relu_setup(seed, shape=(1, 5, 6, 2), c_out=3):
    # positive inputs and kernels keep every pre-activation strictly
    # positive, so the ReLU is locally linear and fd stays honest
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.5, 1.5, size=shape)
    layer = ConvLayer(
        kernel=rng.uniform(0.05, 0.15, size=(3, 3, shape[3], c_out)),
        bias=np.full(c_out, 0.1),
        activation="relu",
    )
    return x, layer


def _loss(layer, x, w):
    return float(np.sum(conv_forward(layer, x) * w))


@pytest.mark.parametrize("activation", ["none", "relu"])
def test_conv_backward_matches_fd(activation):
    rng = np.random.default_rng(7)
    x, layer = _smooth_relu_setup(7)
    if activation == "none":
        layer = ConvLayer(kernel=rng.standard_normal(layer.kernel.shape), bias=rng.standard_normal(3), activation="none")
    w = rng.standard_normal(conv_forward(layer, x).shape)
    gi, gk, gb = conv_backward(layer, x, w)
    step = 1e-6

    def fd(arr, grad, n_probe=12):
        flat = arr.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            hi = _loss(layer, x, w)
            flat[i] = old - step
            lo = _loss(layer, x, w)
            flat[i] = old
            num = (hi - lo) / (2 * step)
            assert abs(num - grad.reshape(-1)[i]) <= 1e-6 * max(1.0, abs(num))

    fd(x, gi)
    fd(layer.kernel, gk)
    fd(layer.bias, gb)


def test_conv_backward_dead_relu_unit_gets_zero_grads():
    x, layer = _smooth_relu_setup(3)
    layer.bias[1] = -100.0  # channel 1 never fires
    w = np.ones(conv_forward(layer, x).shape)
    _, gk, gb = conv_backward(layer, x, w)
    assert np.all(gk[:, :, :, 1] == 0.0)
    assert gb[1] == 0.0
    assert np.any(gk[:, :, :, 0] != 0.0)


def test_relu_subgradient_at_zero_is_zero():
    # pre-activation exactly 0: mask is strict, so nothing flows
    layer = ConvLayer(kernel=np.zeros((1, 1, 1, 1)), bias=np.zeros(1), activation="relu")
    x = np.ones((1, 2, 2, 1))
    gi, gk, gb = conv_backward(layer, x, np.ones((1, 2, 2, 1)))
    assert np.all(gi == 0.0) and np.all(gk == 0.0) and np.all(gb == 0.0)


# identity / zero layers


def test_identity_conv_is_bitwise_identity_on_nonneg():
    rng = np.random.default_rng(0)
    x = np.abs(rng.standard_normal((2, 6, 7, 5)))
    layer = identity_conv(5)
    assert conv_forward(layer, x).tobytes() == x.tobytes()


def test_identity_conv_clamps_negatives():
    layer = identity_conv(2)
    x = np.array([[[[-1.0, 3.0]]]])
    assert np.array_equal(conv_forward(layer, x), np.array([[[[0.0, 3.0]]]]))


def test_zero_conv_outputs_zero():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 4, 4, 6))
    out = conv_forward(zero_conv(6, 3), x)
    assert out.shape == (1, 4, 4, 3)
    assert np.all(out == 0.0)


def test_refiner_init_depth_and_identity():
    layers = refiner_init(4, depth=8)
    assert len(layers) == 8
    x = np.abs(np.random.default_rng(2).standard_normal((1, 5, 5, 4)))
    assert refiner_forward(layers, x).tobytes() == x.tobytes()
    with pytest.raises(ValidationError):
        refiner_init(4, depth=0)


def test_refiner_backward_matches_fd():
    rng = np.random.default_rng(11)
    x = rng.uniform(0.5, 1.5, size=(1, 4, 5, 2))
    layers = [
        ConvLayer(rng.uniform(0.05, 0.15, (3, 3, 2, 2)), np.full(2, 0.1), "relu")
        for _ in range(3)
    ]
    w = rng.standard_normal(x.shape)

    def loss():
        return float(np.sum(refiner_forward(layers, x) * w))

    out, inputs = refiner_forward(layers, x, want_cache=True)
    grads, g_tap = refiner_backward(layers, inputs, w)
    step = 1e-6
    for arr, grad in [(x, g_tap), (layers[0].kernel, grads[0][0]), (layers[2].bias, grads[2][1])]:
        flat = arr.reshape(-1)
        for i in rng.choice(flat.size, size=min(8, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + step
            hi = loss()
            flat[i] = old - step
            lo = loss()
            flat[i] = old
            num = (hi - lo) / (2 * step)
            assert abs(num - grad.reshape(-1)[i]) <= 1e-6 * max(1.0, abs(num))


def test_route_is_invisible_at_init():
    rng = np.random.default_rng(4)
    h = np.abs(rng.standard_normal((1, 6, 6, 3)))
    routed, refined = route(h, refiner_init(3), zero_conv(3, 3))
    assert routed.tobytes() == h.tobytes()
    assert refined.tobytes() == h.tobytes()


# model assembly


def test_model_init_named_params_keys():
    model = model_init(4, depth=2)
    keys = set(model.named_params())
    assert keys == {
        "backbone.pre.kernel", "backbone.pre.bias",
        "backbone.mid.kernel", "backbone.mid.bias",
        "backbone.head.kernel", "backbone.head.bias",
        "refiner.0.kernel", "refiner.0.bias",
        "refiner.1.kernel", "refiner.1.bias",
        "zero.kernel", "zero.bias",
    }


def test_apply_refiner_at_init_is_relu():
    rng = np.random.default_rng(9)
    vol = FeatureVolume(rng.standard_normal((3, 6, 8, 4)).astype(np.float32))
    out = apply_refiner(model_init(4), vol)
    assert out.data.tobytes() == np.maximum(vol.data, 0.0).tobytes()


def test_checkpoint_roundtrip(tmp_path):
    model = model_init(3, depth=2, seed=5)
    model.refiner[1].kernel[0, 0, 1, 2] = 0.25  # make it non-identity
    path = tmp_path / "model.t4gc"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    a, b = model.named_params(), loaded.named_params()
    assert set(a) == set(b)
    for name in a:
        assert a[name].tobytes() == b[name].tobytes(), name
    x = np.random.default_rng(0).standard_normal((1, 5, 5, 3))
    assert np.array_equal(toy_backbone_forward(model, x)[0], toy_backbone_forward(loaded, x)[0])


def test_load_checkpoint_rejects_incomplete(tmp_path):
    model = model_init(3, depth=2)
    path = tmp_path / "model.t4gc"
    save_checkpoint(path, model)
    from corrtrack.core import read_checkpoint, write_checkpoint

    params = read_checkpoint(path)
    del params["backbone.mid.bias"]
    write_checkpoint(path, params)
    with pytest.raises(ValidationError):
        load_checkpoint(path)


# AdamW


def test_adamw_update_textbook_first_step():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = np.array([1.0])
    g = np.array([0.5])
    m = np.zeros(1)
    v = np.zeros(1)
    adamw_update(p, g, m, v, t=1, lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=0.0)
    m_hat = (1 - b1) * 0.5 / (1 - b1)
    v_hat = (1 - b2) * 0.25 / (1 - b2)
    expect = 1.0 - lr * m_hat / (np.sqrt(v_hat) + eps)
    assert abs(p[0] - expect) <= 1e-15
    assert abs(m[0] - 0.05) <= 1e-15
    assert abs(v[0] - 0.00025) <= 1e-18


def test_adamw_decay_applies_before_the_step():
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.5
    p = np.array([2.0])
    g = np.array([0.5])
    adamw_update(p, g, np.zeros(1), np.zeros(1), t=1, lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
    adam_step = lr * 0.5 / (np.sqrt(0.25) + eps)
    assert abs(p[0] - (2.0 * (1 - lr * wd) - adam_step)) <= 1e-15


def test_adamw_two_steps_match_hand_rolled_moments():
    rng = np.random.default_rng(8)
    p = rng.standard_normal(5)
    opt = AdamW(lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    params = {"w": p}
    m = np.zeros(5)
    v = np.zeros(5)
    expect = p.copy()
    for t in (1, 2):
        g = rng.standard_normal(5)
        opt.step(params, {"w": g.copy()})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        expect -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert rel_err(params["w"], expect) <= 1e-12


def test_adamw_skips_absent_grads_entirely():
    opt = AdamW(lr=0.1, weight_decay=0.3)
    p = np.array([1.0, 2.0])
    q = np.array([3.0])
    params = {"p": p, "q": q}
    opt.step(params, {"p": np.array([0.1, 0.1]), "q": None})
    assert q[0] == 3.0  # no decay, no moments, no timestep
    assert "q" not in opt.state
    opt.step(params, {"p": np.array([0.1, 0.1])})
    assert opt.state["p"]["t"] == 2 and "q" not in opt.state


def test_adamw_rejects_negative_lr():
    with pytest.raises(ValidationError):
        AdamW(lr=-1.0)


# train_step and the stop-gradient contract


def _training_batch(seed=0, n=3, h=6, w=8, c=4):
    rng = np.random.default_rng(seed)
    noisy = np.abs(rng.standard_normal((n, h, w, c))) + 0.2
    clean = noisy + 0.1 * rng.standard_normal((n, h, w, c))
    pairs = CorrespondenceSet(
        [
            Pair(Point(2.0, 3.0), 0, Point(3.0, 3.0), 1),
            Pair(Point(5.0, 1.0), 0, Point(5.0, 2.0), 2),
            Pair(Point(1.0, 4.0), 1, Point(2.0, 4.0), 2),
        ]
    )
    return {"noisy": noisy, "clean": clean, "pairs": pairs, "image_size": (h, w)}


def _cfg(**kw):
    kw.setdefault("lr", 1e-3)
    kw.setdefault("match", MatchConfig(window_radius=2.0, occlusion_threshold=0.6))
    kw.setdefault("loss", LossConfig(loss_weight=2.0, pairs_per_step=8))
    return TrainConfig(**kw)


def _snapshot(model):
    return {k: v.copy() for k, v in model.named_params().items()}


def test_train_step_zero_corr_weight_freezes_refiner():
    model = model_init(4, depth=2, seed=1)
    before = _snapshot(model)
    cfg = _cfg(loss=LossConfig(loss_weight=0.0, pairs_per_step=8))
    metrics = train_step(model, AdamW(lr=1e-3), _training_batch(), cfg)
    after = model.named_params()
    for name in before:
        if name.startswith("refiner."):
            assert after[name].tobytes() == before[name].tobytes(), name
    assert not np.array_equal(after["zero.kernel"], before["zero.kernel"])
    assert np.isfinite(metrics["loss_corr"])
    assert metrics["joint"] == metrics["loss_diff"]


def test_train_step_frozen_backbone():
    model = model_init(4, depth=2, seed=1)
    before = _snapshot(model)
    cfg = _cfg(train_backbone=False)
    train_step(model, AdamW(lr=1e-3), _training_batch(), cfg)
    after = model.named_params()
    for name in before:
        if name.startswith("backbone."):
            assert after[name].tobytes() == before[name].tobytes(), name
    assert not np.array_equal(after["zero.kernel"], before["zero.kernel"])
    assert not np.array_equal(after["refiner.0.kernel"], before["refiner.0.kernel"])


def test_train_step_raises_on_nonfinite_input():
    model = model_init(4, depth=2, seed=1)
    batch = _training_batch()
    batch["noisy"] = batch["noisy"].copy()
    batch["noisy"][0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError):
        train_step(model, AdamW(), batch, _cfg())


def _loss_values(model, batch, cfg):
    recon, tap, refined, _, routed, mid = toy_backbone_forward(model, batch["noisy"])
    diff = recon - np.asarray(batch["clean"], dtype=np.float64)
    loss_diff = float((diff * diff).mean())
    loss_corr = corr_loss_value(refined, batch["pairs"], cfg.match, cfg.loss, batch["image_size"])
    return loss_diff, loss_corr


def _fd_probe(model, batch, cfg, name, index, which, step=1e-5):
    arr = model.named_params()[name].reshape(-1)
    old = arr[index]
    arr[index] = old + step
    d_hi, c_hi = _loss_values(model, batch, cfg)
    arr[index] = old - step
    d_lo, c_lo = _loss_values(model, batch, cfg)
    arr[index] = old
    if which == "diff":
        return (d_hi - d_lo) / (2 * step)
    if which == "corr":
        return (c_hi - c_lo) / (2 * step)
    w = cfg.loss.loss_weight
    return ((d_hi + w * c_hi) - (d_lo + w * c_lo)) / (2 * step)


def test_stop_gradient_partition_against_fd():
    # off-init model: the zero conv carries real weight, so the detached
    # refiner->zero path would contaminate grads if the partition leaked
    rng = np.random.default_rng(21)
    model = model_init(4, depth=2, seed=3)
    model.zero.kernel[:] = 0.3 * rng.standard_normal(model.zero.kernel.shape)
    batch = _training_batch(seed=5)
    cfg = _cfg()
    _, grads = compute_grads(model, batch, cfg)

    # zero conv sees only the reconstruction loss; corr ignores it, so
    # the fd of the joint equals the fd of loss_diff here
    g = grads["zero.kernel"].reshape(-1)
    for idx in (0, 5, 9):
        num = _fd_probe(model, batch, cfg, "zero.kernel", idx, "diff")
        assert abs(num - g[idx]) <= 2e-5 * max(1.0, abs(num))
        joint = _fd_probe(model, batch, cfg, "zero.kernel", idx, "joint")
        assert abs(joint - g[idx]) <= 2e-5 * max(1.0, abs(joint))

    # the refiner sees only the weighted corr loss, never loss_diff
    g = grads["refiner.0.kernel"].reshape(-1)
    w = cfg.loss.loss_weight
    for idx in (20, 57, 101):
        num = w * _fd_probe(model, batch, cfg, "refiner.0.kernel", idx, "corr")
        assert abs(num - g[idx]) <= 2e-4 * max(1e-3, abs(num))


def test_pre_gradient_respects_propagate_flag():
    model = model_init(4, depth=2, seed=3)
    batch = _training_batch(seed=5)
    on = _cfg(propagate_into_backbone=True)
    off = _cfg(propagate_into_backbone=False)
    _, g_on = compute_grads(model, batch, on)
    _, g_off = compute_grads(model, batch, off)
    # at identity zero conv, loss_diff cannot reach pre through the splice,
    # but it does reach pre through the trunk; only the corr tap differs
    assert not np.array_equal(g_on["backbone.pre.kernel"], g_off["backbone.pre.kernel"])
    num = _fd_probe(model, batch, off, "backbone.pre.kernel", 30, "diff")
    assert abs(num - g_off["backbone.pre.kernel"].reshape(-1)[30]) <= 2e-4 * max(1e-3, abs(num))


def test_compute_grads_key_partition():
    model = model_init(4, depth=2, seed=1)
    batch = _training_batch()
    _, g_full = compute_grads(model, batch, _cfg())
    assert set(g_full) == set(model.named_params())
    _, g_frozen = compute_grads(model, batch, _cfg(train_backbone=False))
    assert set(g_frozen) == {"zero.kernel", "zero.bias"} | {
        f"refiner.{i}.{p}" for i in range(2) for p in ("kernel", "bias")
    }
    _, g_nocorr = compute_grads(model, batch, _cfg(loss=LossConfig(loss_weight=0.0, pairs_per_step=8)))
    assert set(g_nocorr) == {
        "zero.kernel", "zero.bias",
        "backbone.pre.kernel", "backbone.pre.bias",
        "backbone.mid.kernel", "backbone.mid.bias",
        "backbone.head.kernel", "backbone.head.bias",
    }


# train_refiner plumbing


def _tiny_items(n_items=2, seed=0):
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n_items):
        data = np.abs(rng.standard_normal((3, 8, 8, 4))).astype(np.float32) + 0.2
        clean = FeatureVolume(data)
        noisy = FeatureVolume(data + 0.05 * rng.standard_normal(data.shape).astype(np.float32))
        from corrtrack.core import Track, TrackSet

        tracks = []
        for _ in range(4):
            pos = rng.uniform(1.0, 7.0, size=(3, 2))
            tracks.append(Track(query_frame=0, positions=pos, visible=np.ones(3, bool)))
        ts = TrackSet(num_frames=3, height=8, width=8, tracks=tracks)
        items.append(TrainItem(noisy=noisy, clean=clean, tracks=ts))
    return items


def test_train_refiner_logs_one_row_per_step():
    cfg = _cfg(loss=LossConfig(loss_weight=2.0, pairs_per_step=4))
    model, log = train_refiner(_tiny_items(), epochs=3, seed=7, cfg=cfg)
    assert len(log) == 6
    assert [row["step"] for row in log] == list(range(6))
    for row in log:
        assert set(row) == {"step", "loss_diff", "loss_corr", "joint"}


def test_train_refiner_zero_epochs_returns_init():
    cfg = _cfg()
    model, log = train_refiner(_tiny_items(), epochs=0, seed=7, cfg=cfg)
    assert log == []
    assert np.array_equal(model.refiner[0].kernel, identity_conv(4).kernel)


def test_train_refiner_is_deterministic():
    cfg = _cfg(loss=LossConfig(loss_weight=2.0, pairs_per_step=4))
    m1, log1 = train_refiner(_tiny_items(), epochs=2, seed=3, cfg=cfg)
    m2, log2 = train_refiner(_tiny_items(), epochs=2, seed=3, cfg=cfg)
    assert log1 == log2
    for name, arr in m1.named_params().items():
        assert arr.tobytes() == m2.named_params()[name].tobytes()


def test_train_refiner_rejects_empty_and_mismatched():
    with pytest.raises(ValidationError):
        train_refiner([], epochs=1)
    items = _tiny_items()
    bad = FeatureVolume(np.abs(np.random.default_rng(0).standard_normal((3, 8, 8, 6))).astype(np.float32) + 0.1)
    items[1] = TrainItem(noisy=bad, clean=bad, tracks=items[1].tracks)
    with pytest.raises(ValidationError):
        train_refiner(items, epochs=1)


# pair filtering


def _onehot_item(h=4, w=4):
    """Two identical frames of one-hot cell features: matching is exact,
    so a pair's filter error is just the distance from its stated target
    to its query position."""
    from corrtrack.core import Track, TrackSet

    frame = np.zeros((h, w, h * w))
    for y in range(h):
        for x in range(w):
            frame[y, x, y * w + x] = 1.0
    vol = FeatureVolume(np.stack([frame, frame]).astype(np.float32))
    tr = Track(query_frame=0, positions=np.full((2, 2), 1.0), visible=np.ones(2, bool))
    ts = TrackSet(num_frames=2, height=h, width=w, tracks=[tr])
    return TrainItem(noisy=vol, clean=vol, tracks=ts)


def test_select_trainable_pairs_drops_far_misses():
    item = _onehot_item()
    model = model_init(16, depth=2, seed=0)
    near = [Pair(Point(float(x), float(y)), 0, Point(float(x), float(y)), 1) for x in range(3) for y in range(3)]
    far = [Pair(Point(3.0, float(y)), 0, Point(0.0, float(y)), 1) for y in range(3)]  # 3 px off
    pairs = CorrespondenceSet(near + far)
    cfg = _cfg(loss=LossConfig(loss_weight=2.0, pairs_per_step=8, max_pair_error=2.0))
    kept = select_trainable_pairs(model, item, pairs, cfg)
    assert [(p.query.x, p.query.y) for p in kept.pairs] == [(p.query.x, p.query.y) for p in near]


def test_select_trainable_pairs_floor_keeps_eight_smallest():
    item = _onehot_item()
    model = model_init(16, depth=2, seed=0)
    pairs, errors = [], []
    for i, (x, y) in enumerate([(x, y) for x in range(3) for y in range(4)]):
        target = Point(3.0 - 0.01 * i, 3.0)
        pairs.append(Pair(Point(float(x), float(y)), 0, target, 1))
        errors.append(np.hypot(x - target.x, y - target.y))
    cfg = _cfg(loss=LossConfig(loss_weight=2.0, pairs_per_step=8, max_pair_error=0.5))
    kept = select_trainable_pairs(model, item, CorrespondenceSet(pairs), cfg)
    expected = [pairs[int(i)] for i in np.argsort(errors, kind="stable")[:8]]
    assert [(p.query.x, p.query.y) for p in kept.pairs] == [(p.query.x, p.query.y) for p in expected]


def test_select_trainable_pairs_keeps_small_batches_whole():
    item = _onehot_item()
    model = model_init(16, depth=2, seed=0)
    pairs = CorrespondenceSet([Pair(Point(0.0, 0.0), 0, Point(3.0, 3.0), 1) for _ in range(3)])
    cfg = _cfg(loss=LossConfig(loss_weight=2.0, pairs_per_step=8, max_pair_error=1e-9))
    assert len(select_trainable_pairs(model, item, pairs, cfg).pairs) == 3


def test_select_trainable_pairs_disabled_is_identity():
    item = _onehot_item()
    model = model_init(16, depth=2, seed=0)
    pairs = CorrespondenceSet([Pair(Point(0.0, 0.0), 0, Point(3.0, 3.0), 1)])
    assert select_trainable_pairs(model, item, pairs, _cfg()) is pairs


def test_loss_config_rejects_nonpositive_filter():
    with pytest.raises(ValidationError):
        LossConfig(max_pair_error=0.0)
    with pytest.raises(ValidationError):
        LossConfig(max_pair_error=-1.0)


def test_train_refiner_with_filter_is_deterministic():
    cfg = _cfg(loss=LossConfig(loss_weight=2.0, pairs_per_step=4, max_pair_error=2.0))
    m1, log1 = train_refiner(_tiny_items(), epochs=2, seed=3, cfg=cfg)
    m2, log2 = train_refiner(_tiny_items(), epochs=2, seed=3, cfg=cfg)
    assert log1 == log2 and len(log1) == 4
    for name, arr in m1.named_params().items():
        assert arr.tobytes() == m2.named_params()[name].tobytes()


def test_loss_log_to_csv_round_trips_floats():
    log = [
        {"step": 0, "loss_diff": 0.1 + 0.2, "loss_corr": 1.5, "joint": 0.1 + 0.2 + 1.5},
        {"step": 1, "loss_diff": 1e-17, "loss_corr": 2.0, "joint": 2.0 + 1e-17},
    ]
    text = loss_log_to_csv(log)
    lines = text.strip().split("\n")
    assert lines[0] == "step,loss_diff,loss_corr,joint"
    cells = lines[1].split(",")
    assert float(cells[1]) == 0.1 + 0.2
    assert float(lines[2].split(",")[1]) == 1e-17
