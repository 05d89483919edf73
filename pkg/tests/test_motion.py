"""Block search, dense flow, and field plumbing."""

import numpy as np
import pytest

from mvaction import motion
from synth import texture as _texture


# ---------------------------------------------------------------------- search


def test_full_search_never_beaten_by_tss():
    for trial in range(40):
        rng = np.random.default_rng(100 + trial)
        ref = _texture(200 + trial)
        cur = _texture(300 + trial) if trial % 4 == 0 else np.roll(
            ref, tuple(rng.integers(-5, 6, 2)), (0, 1))
        origin = (int(rng.integers(8, 40)), int(rng.integers(8, 40)))
        fs = motion.full_search(cur, ref, origin, 16, 7)
        tss = motion.three_step_search(cur, ref, origin, 16, 7)
        assert fs.sad <= tss.sad


def test_exact_match_on_lattice_shift():
    # shifts on the first-step grid lock onto SAD 0 immediately and stay
    for s in ((4, 0), (0, -4), (4, 4), (-4, 4)):
        ref = _texture(11)
        cur = np.roll(ref, (s[1], s[0]), (0, 1))
        res = motion.three_step_search(cur, ref, (24, 24), 16, 7)
        assert (res.dx, res.dy) == (-s[0], -s[1])
        assert res.sad == 0


def test_static_pair_prefers_zero_offset():
    ref = _texture(5)
    res = motion.three_step_search(ref, ref, (16, 16), 16, 7)
    assert (res.dx, res.dy, res.sad) == (0, 0, 0)


def test_tie_break_prefers_smaller_offset():
    # constant image: every candidate has SAD 0
    flat = np.full((64, 64), 90, np.uint8)
    res = motion.full_search(flat, flat, (24, 24), 8, 7)
    assert (res.dx, res.dy) == (0, 0)
    res = motion.three_step_search(flat, flat, (24, 24), 8, 7)
    assert (res.dx, res.dy) == (0, 0)


def test_sad_counter_accounts_every_candidate():
    ref = _texture(21)
    cur = np.roll(ref, (2, -3), (0, 1))
    before = motion.sad_eval_count()
    motion.full_search(cur, ref, (24, 24), 8, 7)
    assert motion.sad_eval_count() - before == 15 * 15
    before = motion.sad_eval_count()
    motion.three_step_search(cur, ref, (24, 24), 8, 7)
    spent = motion.sad_eval_count() - before
    assert 9 <= spent <= 27  # interior block: 9 per step, center never re-paid


def test_search_frame_matches_scalar_loop():
    for trial in range(6):
        rng = np.random.default_rng(400 + trial)
        ref = _texture(500 + trial)
        cur = np.roll(ref, tuple(rng.integers(-7, 8, 2)), (0, 1))
        if trial % 3 == 0:
            cur = _texture(600 + trial)
        for bs in (8, 16):
            field = motion.search_frame(cur, ref, bs, 7)
            nb = 64 // bs
            for iy in range(nb):
                for ix in range(nb):
                    res = motion.three_step_search(cur, ref, (ix * bs, iy * bs), bs, 7)
                    assert field.vectors[iy, ix, 0] == -res.dx
                    assert field.vectors[iy, ix, 1] == -res.dy


def test_search_frame_counter_parity_with_scalar():
    ref = _texture(33)
    cur = np.roll(ref, (3, 1), (0, 1))
    before = motion.sad_eval_count()
    motion.search_frame(cur, ref, 16, 7)
    vec_cost = motion.sad_eval_count() - before
    before = motion.sad_eval_count()
    for iy in range(4):
        for ix in range(4):
            motion.three_step_search(cur, ref, (ix * 16, iy * 16), 16, 7)
    scalar_cost = motion.sad_eval_count() - before
    assert vec_cost == scalar_cost


def test_stored_vectors_are_content_displacement():
    # content moves right by 4 -> stored dx is +4 (flow sign), match offset -4
    ref = _texture(44)
    cur = np.roll(ref, 4, axis=1)
    field = motion.search_frame(cur, ref, 16, 7)
    assert field.vectors[1, 1, 0] == 4
    assert field.vectors[1, 1, 1] == 0


# ------------------------------------------------------------------------ flow


def test_flow_recovers_integer_translation():
    errs = []
    for trial in range(6):
        rng = np.random.default_rng(700 + trial)
        shift = rng.integers(-3, 4, 2)
        ref = _texture(800 + trial)
        cur = np.roll(ref, (shift[0], shift[1]), (0, 1))
        flow = motion.estimate_flow(ref, cur)
        u = flow.u[10:-10, 10:-10]
        v = flow.v[10:-10, 10:-10]
        epe = np.sqrt((u - shift[1]) ** 2 + (v - shift[0]) ** 2)
        errs.append(np.median(epe))
    assert np.median(errs) < 0.5


def test_flow_zero_on_static_pair():
    ref = _texture(9)
    flow = motion.estimate_flow(ref, ref)
    assert max(np.abs(flow.u).max(), np.abs(flow.v).max()) < 0.05


def test_flow_raw_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    u = rng.normal(size=(32, 32)).astype(np.float32)
    v = rng.normal(size=(32, 32)).astype(np.float32)
    path = tmp_path / "t.flow"
    motion.write_flow_raw(motion.FlowField(u, v), path)
    back = motion.read_flow_raw(path)
    assert np.array_equal(back.u, u) and np.array_equal(back.v, v)


# ---------------------------------------------------------------------- fields


def test_fill_iframe_gaps_holds_last_predicted():
    vec = np.zeros((4, 4, 2), np.int16)
    vec[..., 0] = 3
    fields = [
        motion.MotionField("I", 8, 4, 4),
        motion.MotionField("P", 8, 4, 4, vec),
        motion.MotionField("I", 8, 4, 4),
    ]
    filled = motion.fill_iframe_gaps(fields)
    assert not filled[0].vectors.any()  # leading intra: nothing to hold yet
    assert np.array_equal(filled[2].vectors, vec)  # trailing intra borrows
    assert filled[1].frame_type == "P"
    assert [f.frame_type for f in filled] == ["I", "P", "I"]


def test_fill_all_intra_returns_zero_motion():
    fields = [motion.MotionField("I", 8, 2, 2) for _ in range(3)]
    filled = motion.fill_iframe_gaps(fields)
    for f in filled:
        assert f.vectors.shape == (2, 2, 2)
        assert not f.vectors.any()


def test_rasterize_expands_blocks():
    vec = np.zeros((2, 2, 2), np.int16)
    vec[0, 0] = (5, -2)
    dense = motion.rasterize(motion.MotionField("P", 8, 2, 2, vec), 16, 16)
    assert dense.shape == (2, 16, 16)
    assert np.all(dense[0, :8, :8] == 5)
    assert np.all(dense[1, :8, :8] == -2)
    assert not dense[:, 8:, 8:].any()


def test_stack_inputs_layout():
    maps = [np.full((2, 16, 16), t + 1, np.float32) for t in range(4)]
    stack = motion.stack_inputs(maps, 1, 3)
    assert stack.shape == (6, 16, 16)
    assert stack[0, 0, 0] == 2 and stack[2, 0, 0] == 3 and stack[4, 0, 0] == 4
    with pytest.raises(ValueError):
        motion.stack_inputs(maps, 2, 3)


def test_resize_bilinear_identity_and_shape():
    img = np.random.default_rng(0).random((3, 17, 23)).astype(np.float32)
    same = motion.resize_bilinear(img, 17, 23)
    assert np.allclose(same, img, atol=1e-6)
    up = motion.resize_bilinear(img, 34, 46)
    assert up.shape == (3, 34, 46)


def test_block_reads_outside_reference_rejected():
    ref = _texture(2)
    with pytest.raises(ValueError):
        motion.three_step_search(ref, ref, (60, 60), 16, 7)
