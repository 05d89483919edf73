"""Dataset generator, codec emulation, and container format."""

import numpy as np
import pytest

from mvaction import motion, videoio
from synth import texture


@pytest.fixture(scope="module")
def tiny():
    manifest, clips = videoio.generate_motionshapes(3, 2, 64, 24)
    return manifest, clips


# -------------------------------------------------------------------- dataset


def test_generator_counts_and_split(tiny):
    manifest, clips = tiny
    assert len(clips) == 16
    assert len(manifest.class_names) == 8
    train, test = manifest.clip_ids("train"), manifest.clip_ids("test")
    assert len(train) + len(test) == 16
    assert set(train).isdisjoint(test)
    labels = {c.label for c in clips}
    assert labels == set(range(8))


def test_generator_determinism():
    _, a = videoio.generate_motionshapes(5, 1, 64, 16)
    _, b = videoio.generate_motionshapes(5, 1, 64, 16)
    for ca, cb in zip(a, b):
        assert ca.clip_id == cb.clip_id
        for fa, fb in zip(ca.frames, cb.frames):
            assert np.array_equal(fa.luma, fb.luma)


def test_generator_seed_sensitivity():
    _, a = videoio.generate_motionshapes(5, 1, 64, 16)
    _, b = videoio.generate_motionshapes(6, 1, 64, 16)
    assert any(not np.array_equal(fa.luma, fb.luma)
               for ca, cb in zip(a, b) for fa, fb in zip(ca.frames, cb.frames))


def test_generator_rejects_bad_geometry():
    with pytest.raises(ValueError):
        videoio.generate_motionshapes(1, 1, 60, 24)  # not a multiple of 16
    with pytest.raises(ValueError):
        videoio.generate_motionshapes(1, 1, 64, 8)  # too short


def test_translate_left_clip_moves_left(tiny):
    manifest, clips = tiny
    left_id = manifest.class_names.index("translate_left")
    clip = next(c for c in clips if c.label == left_id)
    # full-search on raw frames: dominant foreground motion must be dx < 0
    dxs = []
    for a, b in zip(clip.frames[:-1], clip.frames[1:]):
        field = np.array([
            [motion.full_search(b.luma, a.luma, (x, y), 16, 7).dx
             for x in (16, 32)] for y in (16, 32)
        ])
        dxs.extend((-field).ravel().tolist())  # content displacement
    moving = [d for d in dxs if d != 0]
    assert moving and np.mean(moving) < 0


def test_frame_order_shuffle_keeps_histograms(tiny):
    _, clips = tiny
    clip = clips[0]
    hists = [np.bincount(f.luma.ravel(), minlength=256) for f in clip.frames]
    order = np.random.default_rng(0).permutation(len(clip.frames))
    shuffled = [clip.frames[i] for i in order]
    hists2 = [np.bincount(f.luma.ravel(), minlength=256) for f in shuffled]
    assert sorted(map(tuple, hists)) == sorted(map(tuple, hists2))


def test_manifest_round_trip(tmp_path, tiny):
    manifest, _ = tiny
    path = tmp_path / "m.json"
    manifest.save(path)
    back = videoio.DatasetManifest.load(path)
    assert back.class_names == manifest.class_names
    assert back.splits == manifest.splits
    assert back.flip_classes == manifest.flip_classes


# ---------------------------------------------------------------------- codec


def test_gop_frame_typing():
    types = videoio.frame_types_for(24, 8)
    assert types[0] == "I" and types[8] == "I" and types[16] == "I"
    assert all(t == "P" for i, t in enumerate(types) if i % 8)


def test_encode_static_clip_zero_vectors():
    frame = videoio.Frame((np.arange(64 * 64) % 251).astype(np.uint8).reshape(64, 64))
    clip = videoio.Clip([frame] * 17, label=0, clip_id="static")
    cc = videoio.encode(clip, videoio.GopConfig(8, 16, 7))
    for field in videoio.decode_motion_vectors(cc):
        if field.frame_type == "P":
            assert not field.vectors.any()


def test_encode_uniform_shift_matches_oracle():
    base = texture(0, 96)
    frames = [videoio.Frame(np.roll(base, (i * -2, i * 3), (0, 1))[16:80, 16:80])
              for i in range(17)]
    clip = videoio.Clip(frames, label=0, clip_id="pan")
    cc = videoio.encode(clip, videoio.GopConfig(8, 16, 7))
    fields = videoio.decode_motion_vectors(cc)
    for t, field in enumerate(fields):
        if field.frame_type != "P":
            continue
        # interior blocks: content displacement (+3, -2) per frame
        res = motion.full_search(clip.frames[t].luma, clip.frames[t - 1].luma,
                                 (16, 16), 16, 7)
        assert (res.dx, res.dy) == (-3, 2)
        assert field.vectors[1, 1, 0] == 3 and field.vectors[1, 1, 1] == -2


def test_decode_zero_search_cost(tiny):
    _, clips = tiny
    cc = videoio.encode(clips[0], videoio.GopConfig(8, 16, 7))
    before = motion.sad_eval_count()
    videoio.decode_motion_vectors(cc)
    assert motion.sad_eval_count() == before


def test_decoded_clip_recovers_frames(tiny):
    _, clips = tiny
    cc = videoio.encode(clips[0], videoio.GopConfig(8, 8, 7))
    back = videoio.decoded_clip(cc)
    for fa, fb in zip(clips[0].frames, back.frames):
        assert np.array_equal(fa.luma, fb.luma)


def test_encode_determinism(tiny):
    _, clips = tiny
    cfg = videoio.GopConfig(8, 16, 7)
    b1 = videoio.container_bytes(videoio.encode(clips[1], cfg))
    b2 = videoio.container_bytes(videoio.encode(clips[1], cfg))
    assert b1 == b2


def test_gop_config_validation():
    with pytest.raises(ValueError):
        videoio.GopConfig(0, 16, 7)
    with pytest.raises(ValueError):
        videoio.GopConfig(8, 12, 7)
    with pytest.raises(ValueError):
        videoio.GopConfig(8, 16, 0)


# ------------------------------------------------------------------ container


def test_container_round_trip_bytes(tmp_path, tiny):
    _, clips = tiny
    cc = videoio.encode(clips[2], videoio.GopConfig(8, 16, 7))
    path = tmp_path / "c.mvs"
    videoio.write_container(cc, path)
    back = videoio.read_container(path)
    assert videoio.container_bytes(back) == path.read_bytes()
    assert back.header.frame_types == cc.header.frame_types
    assert back.payload == cc.payload


def test_container_corruptions(tmp_path, tiny):
    _, clips = tiny
    cc = videoio.encode(clips[0], videoio.GopConfig(8, 16, 7))
    raw = bytearray(videoio.container_bytes(cc))

    bad_magic = bytearray(raw)
    bad_magic[:4] = b"XXXX"
    with pytest.raises(videoio.ContainerError) as err:
        videoio.parse_container(bytes(bad_magic))
    assert err.value.reason == "magic"

    bad_version = bytearray(raw)
    bad_version[4] = 99
    with pytest.raises(videoio.ContainerError) as err:
        videoio.parse_container(bytes(bad_version))
    assert err.value.reason == "version"

    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    with pytest.raises(videoio.ContainerError) as err:
        videoio.parse_container(bytes(flipped))
    assert err.value.reason == "checksum"

    with pytest.raises(videoio.ContainerError) as err:
        videoio.parse_container(bytes(raw[: len(raw) // 2]))
    assert err.value.reason in ("truncated", "checksum")


def test_empty_clip_rejected():
    clip = videoio.Clip([], label=0, clip_id="empty")
    with pytest.raises((videoio.ContainerError, ValueError)):
        videoio.encode(clip, videoio.GopConfig(8, 16, 7))


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (33, 47), np.uint8)
    path = tmp_path / "x.pgm"
    videoio.write_pgm(img, path)
    assert np.array_equal(videoio.read_pgm(path), img)
