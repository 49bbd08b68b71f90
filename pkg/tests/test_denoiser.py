import numpy as np
import pytest

import layerlab.autodiff as ad
from layerlab.denoiser import (
    LayerDenoiser,
    MODES,
    ModelConfig,
    ModelError,
    PAD_ID,
    TrainConfig,
    TrainingDivergedError,
    condition_patches,
    get_mode,
    noise_interpolate,
    patchify,
    psnr,
    sample,
    target_patches,
    tokenize_text,
    train,
    training_loss,
    unpatchify,
)
from layerlab.imaging import Mask, RgbaImage
from layerlab.scenes import LayerTriplet, render_scene, sample_scene_config

TINY = ModelConfig(dim=32, depth=1, heads=2, patch=8, image_size=64)


def tiny_model(seed=0, cfg=TINY):
    return LayerDenoiser(cfg, seed=seed)


def triplet(seed=3, size=64):
    if size >= 32:
        return render_scene(sample_scene_config(seed, width=size, height=size))
    # sizes below 32 cannot host a full procedural scene, so build one directly
    rng = np.random.default_rng(seed)

    def opaque():
        arr = rng.random((size, size, 4))
        arr[:, :, 3] = 1.0
        return RgbaImage(arr)

    captions = {
        "composite_text": "a small test scene",
        "background_text": "a test background",
        "foreground_text": "a test object",
    }
    return LayerTriplet(
        composite=opaque(),
        background=opaque(),
        fg_ve=RgbaImage(rng.random((size, size, 4))),
        fg_clean=RgbaImage(rng.random((size, size, 4))),
        mask=Mask((rng.random((size, size)) > 0.5).astype(np.uint8)),
        captions=captions,
    )


def assemble(model, mode, trip, rng_seed=0):
    cfg = model.cfg
    rng = np.random.default_rng(rng_seed)
    cond = {r: v[None] for r, v in condition_patches(trip, mode, cfg.patch).items()}
    clean = {r: v[None] for r, v in target_patches(trip, mode, cfg.patch).items()}
    noised = {r: rng.standard_normal(v.shape) for r, v in clean.items()}
    ids = tokenize_text(trip.captions["composite_text"], cfg)[None]
    return model.assemble(mode, ids, cond, noised)


# -- modes -------------------------------------------------------------------


def test_mode_table_is_exactly_the_three_modes():
    assert set(MODES) == {"fg_gen", "bg_gen", "text2all"}
    assert MODES["fg_gen"].conditions == ("text", "mask", "bg")
    assert MODES["fg_gen"].targets == ("comp", "fg_ve")
    assert MODES["bg_gen"].conditions == ("text", "mask", "fg")
    assert MODES["bg_gen"].targets == ("comp", "bg", "fg_ve")
    assert MODES["text2all"].conditions == ("text", "mask")
    assert MODES["text2all"].targets == ("comp", "bg", "fg_ve")
    with pytest.raises(ModelError):
        get_mode("all2all")


@pytest.mark.parametrize("size,patch", [(16, 4), (32, 8), (64, 8)])
def test_sequence_length_formulas(size, patch):
    cfg = ModelConfig(dim=32, depth=1, heads=2, patch=patch, image_size=size, text_len=16)
    model = LayerDenoiser(cfg, seed=0)
    trip = triplet(5, size)
    n = (size // patch) ** 2
    for name, mode in MODES.items():
        tokens, loss_mask, segment = assemble(model, mode, trip)
        n_images = (len(mode.conditions) - 1) + len(mode.targets)
        assert tokens.shape[1] == 16 + n_images * n
        assert int(loss_mask.sum()) == len(mode.targets) * n
        assert len(segment) == tokens.shape[1]
        # the mask never covers a condition token
        for flag, record in zip(loss_mask, segment):
            assert flag == (record["io"] == "output")


def test_assemble_rejects_missing_condition():
    model = tiny_model()
    trip = triplet()
    mode = get_mode("fg_gen")
    clean = {r: v[None] for r, v in target_patches(trip, mode, 8).items()}
    ids = tokenize_text("x", TINY)[None]
    with pytest.raises(ModelError, match="bg"):
        model.assemble(mode, ids, {"mask": clean["comp"]}, clean)


# -- tokenizer ---------------------------------------------------------------


def test_tokenize_empty_is_all_pad():
    assert np.all(tokenize_text("", TINY) == PAD_ID)


def test_tokenize_deterministic_and_padded():
    a = tokenize_text("a red circle", TINY)
    b = tokenize_text("a red circle", TINY)
    assert np.array_equal(a, b)
    assert len(a) == TINY.text_len
    assert np.all(a[3:] == PAD_ID)
    assert np.all(a[:3] != PAD_ID)


def test_tokenize_word_collisions_rare():
    rng = np.random.default_rng(0)
    letters = "abcdefghijklmnopqrstuvwxyz"
    collisions = 0
    for _ in range(1000):
        w1 = "".join(rng.choice(list(letters), 8))
        w2 = "".join(rng.choice(list(letters), 8))
        if w1 != w2 and tokenize_text(w1, TINY)[0] == tokenize_text(w2, TINY)[0]:
            collisions += 1
    assert collisions / 1000 < 0.01


# -- patchify ----------------------------------------------------------------


def test_patchify_roundtrip_bit_identical():
    rng = np.random.default_rng(1)
    img = RgbaImage(rng.random((64, 64, 4)))
    assert np.array_equal(unpatchify(patchify(img, 8), 8, 64, 64), img.data)


def test_patchify_degenerate_single_patch():
    rng = np.random.default_rng(2)
    img = RgbaImage(rng.random((8, 8, 4)))
    out = patchify(img, 8)
    assert out.shape == (1, 256)


def test_patchify_constant_image_equal_rows():
    img = RgbaImage(np.full((16, 16, 4), 0.25))
    out = patchify(img, 4)
    assert np.all(out == out[0])


def test_patchify_rejects_indivisible():
    with pytest.raises(ModelError):
        patchify(RgbaImage(np.zeros((10, 10, 4))), 4)


# -- schedules ---------------------------------------------------------------


def test_linear_flow_endpoints_and_midpoint():
    x0 = np.zeros((2, 3))
    eps = np.full((2, 3), 2.0)
    xt, v = noise_interpolate(x0, eps, 0.0, "linear_flow")
    assert np.array_equal(xt, x0)
    xt, v = noise_interpolate(x0, eps, 1.0, "linear_flow")
    assert np.array_equal(xt, eps)
    xt, v = noise_interpolate(x0, eps, 0.5, "linear_flow")
    assert np.all(xt == 1.0) and np.all(v == 2.0)


def test_vp_endpoints():
    rng = np.random.default_rng(3)
    x0, eps = rng.random((4, 4)), rng.random((4, 4))
    xt, tgt = noise_interpolate(x0, eps, 0.0, "vp")
    assert np.allclose(xt, x0, atol=1e-15)
    xt, tgt = noise_interpolate(x0, eps, 1.0, "vp")
    assert np.allclose(xt, eps, atol=1e-15)
    assert np.array_equal(tgt, eps)


def test_noise_interpolate_rejects_bad_t():
    with pytest.raises(ModelError):
        noise_interpolate(np.zeros(2), np.zeros(2), 1.5, "vp")


# -- loss --------------------------------------------------------------------


def test_loss_at_init_equals_mean_squared_target():
    # output head is zero-initialized, so predictions are exactly zero
    model = tiny_model()
    trip = triplet()
    mode = get_mode("fg_gen")
    rng = np.random.default_rng(0)
    t = 0.37
    clean = target_patches(trip, mode, 8)
    eps = {r: rng.standard_normal(v.shape) for r, v in clean.items()}
    loss = training_loss(model, mode, trip, rng, t=t, eps=eps)
    targets = [noise_interpolate(clean[r], eps[r], t, "linear_flow")[1] for r in mode.targets]
    expect = float(np.mean(np.concatenate(targets, axis=0) ** 2))
    assert abs(float(loss.values) - expect) < 1e-12


def test_condition_pixels_leak_only_through_predictions():
    # with zero predictions the loss must ignore condition content entirely
    model = tiny_model()
    mode = get_mode("fg_gen")
    t1, t2 = triplet(3), triplet(3)
    noisy_bg = np.clip(t2.background.data + 0.3 * (np.random.default_rng(0).random((64, 64, 4)) - 0.5), 0, 1)
    noisy_bg[:, :, 3] = 1.0
    t2.background = RgbaImage(noisy_bg)
    rng = np.random.default_rng(1)
    clean = target_patches(t1, mode, 8)
    eps = {r: np.random.default_rng(2).standard_normal(v.shape) for r, v in clean.items()}
    l1 = training_loss(model, mode, t1, rng, t=0.5, eps=eps)
    l2 = training_loss(model, mode, t2, rng, t=0.5, eps=eps)
    assert float(l1.values) == float(l2.values)


def test_condition_order_is_canonical_bitwise():
    model = tiny_model(seed=7)
    trip = triplet(4)
    mode = get_mode("bg_gen")
    rng = np.random.default_rng(5)
    noised = {r: rng.standard_normal((model.cfg.patches_per_image, model.cfg.patch_dim))
              for r in mode.targets}
    a = model.build_sequence(mode, trip, noised, 0.3, condition_order=("mask", "fg"))
    b = model.build_sequence(mode, trip, noised, 0.3, condition_order=("fg", "mask"))
    assert np.array_equal(a.tokens.values, b.tokens.values)
    with pytest.raises(ModelError):
        model.build_sequence(mode, trip, noised, 0.3, condition_order=("mask", "bg"))


def test_full_loss_finite_difference_small_model():
    cfg = ModelConfig(dim=16, depth=1, heads=2, patch=4, image_size=8)
    model = LayerDenoiser(cfg, seed=0)
    trip = triplet(6, 8)
    mode = get_mode("fg_gen")
    clean = target_patches(trip, mode, 4)
    eps = {r: np.random.default_rng(1).standard_normal(v.shape) for r, v in clean.items()}

    def loss_fn():
        return training_loss(model, mode, trip, np.random.default_rng(0), t=0.4, eps=eps)

    loss = loss_fn()
    ad.backward(loss)
    h = 1e-5
    rng = np.random.default_rng(2)
    worst = 0.0
    for name, p in model.params.items():
        if p.grad is None:
            continue
        flat = p.values.reshape(-1)
        gflat = p.grad.reshape(-1)
        k = min(4, flat.size)
        for i in rng.choice(flat.size, size=k, replace=False):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(loss_fn().values)
            flat[i] = orig - h
            lo = float(loss_fn().values)
            flat[i] = orig
            num = (hi - lo) / (2 * h)
            rel = abs(gflat[i] - num) / max(abs(num), 1e-3)
            worst = max(worst, rel)
    assert worst < 1e-4, f"worst rel err {worst:.2e}"


# -- training ----------------------------------------------------------------


def test_train_rejects_empty_inputs():
    model = tiny_model()
    with pytest.raises(ModelError):
        train(model, [], TrainConfig(steps=1))
    with pytest.raises(ModelError):
        train(model, [triplet()], TrainConfig(steps=1, modes=()))


def test_train_zero_steps_keeps_initialization(tmp_path):
    model = tiny_model(seed=5)
    before = {k: v.values.copy() for k, v in model.params.items()}
    train(model, [triplet()], TrainConfig(steps=0, seed=0))
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    model.save(p1)
    LayerDenoiser(TINY, seed=5).save(p2)
    assert p1.read_bytes() == p2.read_bytes()
    for k in before:
        assert np.array_equal(model.params[k].values, before[k])


def test_train_logs_and_reduces_loss(tmp_path):
    model = tiny_model(seed=1)
    data = [triplet(s) for s in (1, 2)]
    log_path = tmp_path / "loss.jsonl"
    log = train(model, data, TrainConfig(steps=12, batch_size=2, seed=0, lr=1e-3,
                                         warmup_steps=2), log_path=log_path)
    assert len(log) == 12
    assert {"step", "mode", "loss"} <= set(log[0])
    lines = [l for l in log_path.read_text().splitlines() if l.strip()]
    assert len(lines) == 12
    assert all(np.isfinite(e["loss"]) for e in log)


def test_train_determinism():
    data = [triplet(9)]
    cfgs = []
    for _ in range(2):
        model = tiny_model(seed=2)
        train(model, data, TrainConfig(steps=3, batch_size=2, seed=4))
        cfgs.append({k: v.values.copy() for k, v in model.params.items()})
    for k in cfgs[0]:
        assert np.array_equal(cfgs[0][k], cfgs[1][k])


def test_train_nan_abort():
    model = tiny_model(seed=3)
    model.params["w_out"].values[:] = np.nan
    with pytest.raises(TrainingDivergedError, match="step 0"):
        train(model, [triplet()], TrainConfig(steps=1, seed=0))


# -- sampling ----------------------------------------------------------------


def conditions_for(mode, trip):
    conds = {"caption": trip.captions["composite_text"]}
    if "mask" in mode.conditions:
        conds["mask"] = trip.mask
    if "bg" in mode.conditions:
        conds["bg"] = trip.background
    if "fg" in mode.conditions:
        conds["fg"] = trip.fg_clean
    return conds


def test_sample_returns_exact_target_roles():
    model = tiny_model()
    trip = triplet()
    for name, mode in MODES.items():
        out = sample(model, mode, conditions_for(mode, trip), steps=2, seed=0)
        assert set(out) == set(mode.targets)
        for role, img in out.items():
            assert img.data.shape == (64, 64, 4)
            if role in ("comp", "bg"):
                assert np.all(img.alpha == 1.0)


def test_sample_deterministic():
    model = tiny_model()
    trip = triplet()
    mode = get_mode("text2all")
    a = sample(model, mode, conditions_for(mode, trip), steps=3, seed=9)
    b = sample(model, mode, conditions_for(mode, trip), steps=3, seed=9)
    for role in mode.targets:
        assert np.array_equal(a[role].data, b[role].data)


def test_sample_rejects_missing_condition():
    model = tiny_model()
    with pytest.raises(ModelError, match="mask"):
        sample(model, get_mode("text2all"), {"caption": "x"}, steps=1)


def test_teacher_velocity_sampler_recovers_targets():
    model = tiny_model()
    trip = triplet(8)
    mode = get_mode("fg_gen")
    cfg = model.cfg
    n, pd = cfg.patches_per_image, cfg.patch_dim
    seed = 11
    eps0 = {r: np.random.default_rng(seed).standard_normal((1, n, pd)) for r in [None]}
    rng = np.random.default_rng(seed)
    eps0 = {r: rng.standard_normal((1, n, pd)) for r in mode.targets}
    x0 = {r: v[None] for r, v in target_patches(trip, mode, cfg.patch).items()}

    def teacher(xs, t):
        return np.concatenate([eps0[r] - x0[r] for r in mode.targets], axis=1)

    out = sample(model, mode, conditions_for(mode, trip), steps=50, seed=seed,
                 velocity_fn=teacher)
    truth = {"comp": trip.composite, "fg_ve": trip.fg_ve}
    for role in mode.targets:
        assert np.abs(out[role].data - truth[role].data).max() < 1e-8


def test_vp_sampler_runs_and_stays_in_range():
    cfg = ModelConfig(dim=32, depth=1, heads=2, patch=8, image_size=64, schedule="vp")
    model = LayerDenoiser(cfg, seed=0)
    trip = triplet()
    mode = get_mode("fg_gen")
    out = sample(model, mode, conditions_for(mode, trip), steps=4, seed=0)
    for img in out.values():
        assert img.data.min() >= 0.0 and img.data.max() <= 1.0


# -- persistence / psnr ------------------------------------------------------


def test_model_checkpoint_roundtrip(tmp_path):
    model = tiny_model(seed=6)
    path = tmp_path / "m.bin"
    model.save(path)
    back = LayerDenoiser.load(path)
    assert back.cfg == model.cfg
    for k in model.params:
        assert np.array_equal(back.params[k].values, model.params[k].values)


def test_psnr_cap_and_values():
    a = RgbaImage(np.zeros((4, 4, 4)))
    assert psnr(a, a) == 80.0
    b = RgbaImage(np.full((4, 4, 4), 0.1))
    assert abs(psnr(a, b) - 20.0) < 1e-9
