"""Augmentation, window stacking, fusion, evaluation, experiment plumbing."""

import numpy as np
import pytest

from mvaction import distill, nn, pipeline, videoio


@pytest.fixture(scope="module")
def small_prepared():
    manifest, clips = videoio.generate_motionshapes(11, 2, 64, 24)
    prepared = pipeline.prepare_dataset(manifest, clips, videoio.GopConfig(8, 8, 7),
                                        with_flow=False)
    return manifest, prepared


# ---------------------------------------------------------------- augmentation


def test_augment_deterministic_per_seed():
    x = np.random.default_rng(0).normal(size=(4, 64, 64)).astype(np.float32)
    a = pipeline.augment_train(x, pipeline.AugmentConfig(), seed=3)
    b = pipeline.augment_train(x, pipeline.AugmentConfig(), seed=3)
    c = pipeline.augment_train(x, pipeline.AugmentConfig(), seed=4)
    assert np.array_equal(a, b)
    assert a.shape == x.shape
    assert not np.array_equal(a, c)


def test_flip_negates_dx_and_keeps_dy_bits():
    x = np.random.default_rng(1).normal(size=(6, 32, 32)).astype(np.float32)
    params = pipeline.AugmentParams(32, 32, 0, 0, flip=True)
    y = pipeline.apply_augment(x, params, 32, motion_channels=True)
    mirrored = x[:, :, ::-1]
    for ch in range(6):
        if ch % 2 == 0:
            assert np.array_equal(y[ch], -mirrored[ch])
        else:
            assert np.array_equal(y[ch], mirrored[ch])
    # flipping twice restores the original bit pattern
    z = pipeline.apply_augment(y, params, 32, motion_channels=True)
    assert np.array_equal(z, x)


def test_flip_rgb_keeps_values():
    x = np.random.default_rng(2).normal(size=(3, 16, 16)).astype(np.float32)
    params = pipeline.AugmentParams(16, 16, 0, 0, flip=True)
    y = pipeline.apply_augment(x, params, 16, motion_channels=False)
    assert np.array_equal(y, x[:, :, ::-1])


def test_center_crop_identity_on_square():
    x = np.random.default_rng(3).normal(size=(2, 20, 20)).astype(np.float32)
    assert np.array_equal(pipeline.augment_test(x), x)


def test_crop_resize_shapes():
    x = np.random.default_rng(4).normal(size=(2, 64, 64)).astype(np.float32)
    params = pipeline.AugmentParams(48, 48, 5, 7, flip=False)
    y = pipeline.apply_augment(x, params, 64, motion_channels=True)
    assert y.shape == (2, 64, 64)


def test_draw_augment_uses_configured_scales():
    cfg = pipeline.AugmentConfig(scales=(1.0, 0.875, 0.75), flip_prob=0.5)
    rng = np.random.default_rng(5)
    seen = set()
    for _ in range(60):
        p = pipeline.draw_augment(cfg, 64, 64, rng)
        seen.add(p.crop_w)
        assert p.x0 + p.crop_w <= 64 and p.y0 + p.crop_h <= 64
    assert seen == {64, 56, 48}


# -------------------------------------------------------------------- stacking


def test_window_stack_mv_shapes_and_scaling(small_prepared):
    manifest, prepared = small_prepared
    prep = prepared[manifest.clip_ids("train")[0]]
    stack = pipeline.window_stack(prep, 0, 10, "mv")
    assert stack.shape == (20, 64, 64)
    assert np.abs(stack).max() <= 1.0 + 1e-6  # vectors scaled by search range
    rgb = pipeline.window_stack(prep, 0, 10, "rgb")
    assert rgb.shape == (3, 64, 64)
    assert np.array_equal(rgb[0], rgb[1])


def test_window_stack_flow_requires_flow(small_prepared):
    manifest, prepared = small_prepared
    prep = prepared[manifest.clip_ids("train")[0]]
    with pytest.raises(ValueError):
        pipeline.window_stack(prep, 0, 10, "flow")


def test_batch_stream_determinism_and_labels(small_prepared):
    manifest, prepared = small_prepared
    train = [prepared[c] for c in manifest.clip_ids("train")]
    cfg = pipeline.ExperimentConfig(batch_size=4)
    s1 = pipeline.batch_stream(train, cfg, "mv", seed=2,
                               flip_map=manifest.flip_classes)
    s2 = pipeline.batch_stream(train, cfg, "mv", seed=2,
                               flip_map=manifest.flip_classes)
    for _ in range(3):
        a, b = next(s1), next(s2)
        assert np.array_equal(a.student_x, b.student_x)
        assert np.array_equal(a.labels, b.labels)
        assert a.student_x.shape == (4, 20, 64, 64)
        assert a.labels.min() >= 0 and a.labels.max() < 8


def test_flip_remaps_translation_labels():
    flip = videoio.HFLIP_CLASS_MAP
    left = videoio.CLASS_NAMES.index("translate_left")
    right = videoio.CLASS_NAMES.index("translate_right")
    up = videoio.CLASS_NAMES.index("translate_up")
    cw = videoio.CLASS_NAMES.index("rotate_cw")
    ccw = videoio.CLASS_NAMES.index("rotate_ccw")
    assert flip[left] == right and flip[right] == left
    assert flip[cw] == ccw and flip[ccw] == cw  # mirroring reverses spin
    assert flip[up] == up
    for name in ("translate_down", "zoom_in", "zoom_out"):
        i = videoio.CLASS_NAMES.index(name)
        assert flip[i] == i


# ---------------------------------------------------------------------- fusion


def test_fuse_worked_example():
    fused, cls = pipeline.fuse(np.array([0.2, 0.8]), np.array([0.6, 0.4]),
                               pipeline.FusionWeights(1, 2))
    assert np.allclose(fused, [0.4667, 0.5333], atol=5e-5)
    assert cls == 1


def test_fuse_zero_temporal_weight():
    s = np.array([0.1, 0.9])
    fused, _ = pipeline.fuse(s, np.array([0.7, 0.3]), pipeline.FusionWeights(1, 0))
    assert np.allclose(fused, s)


def test_fuse_invariances_sampled():
    rng = np.random.default_rng(6)
    for _ in range(200):
        s = rng.random(8)
        t = rng.random(8)
        _, c1 = pipeline.fuse(s, t, pipeline.FusionWeights(1, 2))
        _, c2 = pipeline.fuse(s, t, pipeline.FusionWeights(3, 6))
        k = rng.uniform(0.1, 10)
        _, c3 = pipeline.fuse(k * s, k * t, pipeline.FusionWeights(1, 2))
        assert c1 == c2 == c3


def test_fuse_shape_mismatch():
    with pytest.raises(ValueError):
        pipeline.fuse(np.ones(3), np.ones(4))


# ------------------------------------------------------------------ evaluation


def test_evaluate_counts_and_skip(small_prepared):
    manifest, prepared = small_prepared
    clips = [prepared[c] for c in manifest.clip_ids("test")]
    net = nn.build_mini_two_stream(64, 20, 8, "prelu", seed=0)
    report = pipeline.evaluate(net, clips, stride=4, modality="mv",
                               cfg=pipeline.ExperimentConfig())
    assert report.confusion.shape == (8, 8)
    assert report.confusion.sum() == report.clips_evaluated == len(clips)
    assert report.clips_skipped == 0
    assert 0.0 <= report.overall_accuracy <= 1.0

    # short clip: fewer frames than one stack window -> skipped and counted
    short = pipeline.PreparedClip(
        clip_id="short", label=0, split="test",
        frames=clips[0].frames[:5], mv_fields=clips[0].mv_fields[:4],
        block_size=clips[0].block_size, flow=None)
    report = pipeline.evaluate(net, [short], stride=4, modality="mv",
                               cfg=pipeline.ExperimentConfig())
    assert report.clips_evaluated == 0
    assert report.clips_skipped == 1


def test_evaluate_stride_equals_span_gives_one_window(small_prepared):
    manifest, prepared = small_prepared
    prep = prepared[manifest.clip_ids("test")[0]]
    windows = pipeline._clip_windows(prep, stride=prep.transitions, stack_length=10)
    assert len(windows) == 1 and windows[0] == 0


def test_evaluate_deterministic(small_prepared):
    manifest, prepared = small_prepared
    clips = [prepared[c] for c in manifest.clip_ids("test")]
    net = nn.build_mini_two_stream(64, 20, 8, "prelu", seed=1)
    r1 = pipeline.evaluate(net, clips, 4, "mv", pipeline.ExperimentConfig())
    r2 = pipeline.evaluate(net, clips, 4, "mv", pipeline.ExperimentConfig())
    assert np.array_equal(r1.confusion, r2.confusion)


# ------------------------------------------------------------------ experiment


def test_experiment_report_table_and_csv(tmp_path):
    rep = pipeline.ExperimentReport(config=pipeline.ExperimentConfig())
    for strat, accs in (("scratch", (0.5, 0.6)), ("combined", (0.8, 0.7)),
                        ("teacher", (0.9, 0.94))):
        for seed, acc in enumerate(accs, start=1):
            rep.add(strat, seed, acc)
    table = rep.table()
    assert "MV-scratch" in table and "EMV-ST+TI" in table and "OF-teacher" in table
    # ordering of rows follows the fixed label order
    assert table.index("MV-scratch") < table.index("EMV-ST+TI") < table.index("OF-teacher")
    path = tmp_path / "r.csv"
    rep.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "strategy,seed,accuracy"
    assert len(lines) == 7
    assert rep.mean("scratch") == pytest.approx(0.55)


def test_prepared_clip_matches_direct_encode(small_prepared):
    manifest, prepared = small_prepared
    cid = manifest.clip_ids("train")[0]
    prep = prepared[cid]
    assert prep.mv_fields.shape == (len(prep.frames) - 1, 8, 8, 2)
    assert prep.mv_fields.dtype == np.int8
    assert prep.frames.dtype == np.uint8


def test_lr_for_strategy():
    cfg = pipeline.ExperimentConfig()
    # scratch takes the full rate, teacher-supervised runs the reduced one
    assert cfg.lr_for("scratch") == pytest.approx(1e-2)
    for strat in ("teacher_init", "supervision_transfer", "combined"):
        assert cfg.lr_for(strat) == pytest.approx(1e-3)
