"""Motion estimation primitives.

Block-level motion: a fast three-step search (the kind of logarithmic
matcher video encoders use) plus an exhaustive full search that serves as
its oracle in tests.  Pixel-level motion: a pyramidal windowed
least-squares optical flow estimator.  Utilities convert block fields into
dense per-pixel CNN input maps and patch the frames that carry no motion
of their own.

Sign convention: a motion vector or flow value (dx, dy) is the
displacement of image content from the reference/previous frame into the
current frame, i.e. content that sat at p in the reference appears at
p + (dx, dy) now.  The raw block searches return the opposite sign (the
offset into the reference where the current block matches); callers that
store motion fields negate it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

FRAME_I = "I"
FRAME_P = "P"

_sad_evals = 0


def sad_eval_count() -> int:
    """Running count of SAD evaluations, for cost instrumentation."""
    return _sad_evals


@dataclass(frozen=True)
class SearchResult:
    """Outcome of a block search: offset into the reference and its cost."""

    dx: int
    dy: int
    sad: int


@dataclass
class MotionField:
    """Block-level motion grid for one frame.

    ``vectors`` has shape (blocks_y, blocks_x, 2) with (dx, dy) displacement
    per block, or None for an intra frame that has not been gap-filled yet.
    """

    frame_type: str
    block_size: int
    blocks_x: int
    blocks_y: int
    vectors: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.frame_type not in (FRAME_I, FRAME_P):
            raise ValueError(f"unknown frame type {self.frame_type!r}")
        if self.vectors is not None:
            v = np.asarray(self.vectors, dtype=np.int16)
            if v.shape != (self.blocks_y, self.blocks_x, 2):
                raise ValueError(
                    f"vector grid shape {v.shape} does not match "
                    f"{(self.blocks_y, self.blocks_x, 2)}"
                )
            if np.abs(v).max(initial=0) > 127:
                raise ValueError("motion vectors exceed the signed byte range")
            self.vectors = v

    def copy(self) -> "MotionField":
        vec = None if self.vectors is None else self.vectors.copy()
        return MotionField(self.frame_type, self.block_size, self.blocks_x, self.blocks_y, vec)


@dataclass
class FlowField:
    """Dense per-pixel displacement, one float plane per component."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape:
            raise ValueError("u and v planes differ in shape")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise ValueError("flow field contains non-finite values")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]


def _luma(frame) -> np.ndarray:
    """Accept either a Frame-like object with a .luma plane or a bare array."""
    return np.asarray(getattr(frame, "luma", frame))


def _sad(block: np.ndarray, ref: np.ndarray, x: int, y: int, bs: int) -> int:
    global _sad_evals
    _sad_evals += 1
    patch = ref[y : y + bs, x : x + bs].astype(np.int32)
    return int(np.abs(block - patch).sum())


def _better(key, best_key) -> bool:
    return best_key is None or key < best_key


def _candidate_key(sadv: int, dx: int, dy: int):
    # Tie order: cost, then displacement magnitude, then dy, then dx.
    return (sadv, abs(dx) + abs(dy), dy, dx)


def _check_block(cur: np.ndarray, block_origin, block_size: int) -> np.ndarray:
    x0, y0 = block_origin
    h, w = cur.shape
    if x0 < 0 or y0 < 0 or x0 + block_size > w or y0 + block_size > h:
        raise ValueError(
            f"block at {(x0, y0)} with size {block_size} falls outside the "
            f"{w}x{h} frame"
        )
    return cur[y0 : y0 + block_size, x0 : x0 + block_size].astype(np.int32)


def three_step_search(cur, ref, block_origin, block_size: int, search_range: int = 7) -> SearchResult:
    """Logarithmic block search with shrinking steps (4, 2, 1 for range 7).

    Evaluates 9 candidates around the current centre at each step and
    recentres on the best.  Candidates that would read outside the
    reference are skipped.  Returns the offset into `ref` at which the
    block from `cur` matches best, with its SAD.
    """
    cur = _luma(cur)
    ref = _luma(ref)
    x0, y0 = block_origin
    block = _check_block(cur, block_origin, block_size)
    h, w = ref.shape

    step = (search_range + 1) // 2
    cx = cy = 0
    best_sad = None
    while step >= 1:
        best_key = None
        best = (cx, cy, 0)
        for oy in (-step, 0, step):
            for ox in (-step, 0, step):
                dx, dy = cx + ox, cy + oy
                if max(abs(dx), abs(dy)) > search_range:
                    continue
                rx, ry = x0 + dx, y0 + dy
                if rx < 0 or ry < 0 or rx + block_size > w or ry + block_size > h:
                    continue
                key = _candidate_key(_sad(block, ref, rx, ry, block_size), dx, dy)
                if _better(key, best_key):
                    best_key = key
                    best = (dx, dy, key[0])
        cx, cy, best_sad = best
        step //= 2
    return SearchResult(cx, cy, best_sad)


def full_search(cur, ref, block_origin, block_size: int, search_range: int = 7) -> SearchResult:
    """Exhaustive scan of the whole (2r+1)^2 window; the search oracle."""
    cur = _luma(cur)
    ref = _luma(ref)
    x0, y0 = block_origin
    block = _check_block(cur, block_origin, block_size)
    h, w = ref.shape

    best_key = None
    best = (0, 0, None)
    for dy in range(-search_range, search_range + 1):
        ry = y0 + dy
        if ry < 0 or ry + block_size > h:
            continue
        for dx in range(-search_range, search_range + 1):
            rx = x0 + dx
            if rx < 0 or rx + block_size > w:
                continue
            key = _candidate_key(_sad(block, ref, rx, ry, block_size), dx, dy)
            if _better(key, best_key):
                best_key = key
                best = (dx, dy, key[0])
    return SearchResult(*best)


def search_frame(cur, ref, block_size: int, search_range: int = 7) -> MotionField:
    """Run the three-step search on every macroblock of a predicted frame.

    All blocks advance through the shrinking-step schedule together so each
    candidate round is one vectorized SAD pass; results are identical to
    calling three_step_search per block, including tie handling (the
    candidate key is a total order, so "first best wins" never differs
    from "minimum key wins").

    Stored vectors are content displacements (the negated match offset),
    so they share sign semantics with optical flow.
    """
    global _sad_evals
    cur = _luma(cur)
    ref = _luma(ref)
    if cur.shape != ref.shape:
        raise ValueError(f"frame shapes differ: {cur.shape} vs {ref.shape}")
    h, w = cur.shape
    bs = block_size
    if h % bs or w % bs:
        raise ValueError(f"frame {w}x{h} is not a multiple of block size {bs}")
    by, bx = h // bs, w // bs

    blocks = cur.reshape(by, bs, bx, bs).transpose(0, 2, 1, 3).reshape(by * bx, bs, bs)
    blocks = blocks.astype(np.int32)
    windows = np.lib.stride_tricks.sliding_window_view(ref, (bs, bs))
    oy0, ox0 = np.mgrid[0:by, 0:bx]
    x0 = (ox0 * bs).reshape(-1)
    y0 = (oy0 * bs).reshape(-1)

    big = np.iinfo(np.int64).max
    cx = np.zeros(by * bx, np.int64)
    cy = np.zeros(by * bx, np.int64)
    sad_out = np.zeros(by * bx, np.int64)
    step = (search_range + 1) // 2
    while step >= 1:
        b_sad = np.full(by * bx, big, np.int64)
        b_man = np.full(by * bx, big, np.int64)
        b_dy = np.zeros(by * bx, np.int64)
        b_dx = np.zeros(by * bx, np.int64)
        for oy in (-step, 0, step):
            for ox in (-step, 0, step):
                dx = cx + ox
                dy = cy + oy
                rx = x0 + dx
                ry = y0 + dy
                valid = (
                    (np.maximum(np.abs(dx), np.abs(dy)) <= search_range)
                    & (rx >= 0) & (ry >= 0) & (rx + bs <= w) & (ry + bs <= h)
                )
                idx = np.nonzero(valid)[0]
                if idx.size == 0:
                    continue
                patches = windows[ry[idx], rx[idx]].astype(np.int32)
                sad = np.abs(blocks[idx] - patches).sum(axis=(1, 2)).astype(np.int64)
                _sad_evals += idx.size
                man = np.abs(dx[idx]) + np.abs(dy[idx])
                cdy, cdx = dy[idx], dx[idx]
                better = (sad < b_sad[idx]) | (
                    (sad == b_sad[idx])
                    & ((man < b_man[idx]) | (
                        (man == b_man[idx])
                        & ((cdy < b_dy[idx]) | ((cdy == b_dy[idx]) & (cdx < b_dx[idx])))
                    ))
                )
                upd = idx[better]
                b_sad[upd] = sad[better]
                b_man[upd] = man[better]
                b_dy[upd] = cdy[better]
                b_dx[upd] = cdx[better]
        cx, cy, sad_out = b_dx, b_dy, b_sad
        step //= 2

    vec = np.empty((by * bx, 2), dtype=np.int16)
    vec[:, 0] = -cx
    vec[:, 1] = -cy
    return MotionField(FRAME_P, bs, bx, by, vec.reshape(by, bx, 2))


# ---------------------------------------------------------------------------
# Dense optical flow
# ---------------------------------------------------------------------------


def _box_sum(a: np.ndarray, radius: int) -> np.ndarray:
    """Sum of a over a (2r+1)^2 window, clipped at image borders."""
    h, w = a.shape
    c = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(a, axis=0, out=c[1:, 1:])
    np.cumsum(c[1:, 1:], axis=1, out=c[1:, 1:])
    y0 = np.clip(np.arange(h) - radius, 0, h)
    y1 = np.clip(np.arange(h) + radius + 1, 0, h)
    x0 = np.clip(np.arange(w) - radius, 0, w)
    x1 = np.clip(np.arange(w) + radius + 1, 0, w)
    return c[y1[:, None], x1[None, :]] - c[y0[:, None], x1[None, :]] \
        - c[y1[:, None], x0[None, :]] + c[y0[:, None], x0[None, :]]


def _bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(planes: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes of (..., h, w) with bilinear sampling.

    Endpoint-aligned, so equal in/out sizes give the identity exactly.
    """
    h, w = planes.shape[-2:]
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output dimensions must be positive")
    if (out_h, out_w) == (h, w):
        return planes.copy()
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    # Interpolation weights in the input precision (when already float32 or
    # wider) so float32 stacks are not silently promoted to float64.
    dt = planes.dtype if planes.dtype in (np.float32, np.float64) else np.float64
    fy = (ys - y0).astype(dt).reshape(-1, 1)
    fx = (xs - x0).astype(dt)
    a = planes[..., y0, :] * (1 - fy) + planes[..., y1, :] * fy
    return a[..., x0] * (1 - fx) + a[..., x1] * fx


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    return img[: h - h % 2, : w - w % 2].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def estimate_flow(prev, next, levels: int = 3, iters_per_level: int = 3, window: int = 7) -> FlowField:
    """Coarse-to-fine dense flow by windowed least squares.

    At each pyramid level the moving frame is warped by the current
    estimate, image gradients and the temporal difference are pooled over a
    `window`-sized neighbourhood, and the 2x2 normal equations give a flow
    update per pixel.  Windows with a degenerate structure tensor fall back
    to a zero update, so the result is finite everywhere.
    """
    a = _luma(prev).astype(np.float64) / 255.0
    b = _luma(next).astype(np.float64) / 255.0
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < (2 ** levels) * window:
        raise ValueError(
            f"frames of shape {a.shape} too small for {levels} pyramid levels "
            f"with window {window}"
        )

    pyr_a = [a]
    pyr_b = [b]
    for _ in range(levels - 1):
        pyr_a.append(_downsample2(pyr_a[-1]))
        pyr_b.append(_downsample2(pyr_b[-1]))

    radius = window // 2
    u = np.zeros_like(pyr_a[-1])
    v = np.zeros_like(pyr_a[-1])
    for lvl in range(levels - 1, -1, -1):
        ia, ib = pyr_a[lvl], pyr_b[lvl]
        h, w = ia.shape
        gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
        for _ in range(iters_per_level):
            warped = _bilinear_sample(ib, gx + u, gy + v)
            iy, ix = np.gradient(warped)
            it = warped - ia
            a11 = _box_sum(ix * ix, radius)
            a12 = _box_sum(ix * iy, radius)
            a22 = _box_sum(iy * iy, radius)
            b1 = -_box_sum(ix * it, radius)
            b2 = -_box_sum(iy * it, radius)
            det = a11 * a22 - a12 * a12
            valid = det > 1e-9
            det = np.where(valid, det, 1.0)
            du = np.where(valid, (a22 * b1 - a12 * b2) / det, 0.0)
            dv = np.where(valid, (a11 * b2 - a12 * b1) / det, 0.0)
            u += np.clip(du, -window, window)
            v += np.clip(dv, -window, window)
        if lvl > 0:
            nh, nw = pyr_a[lvl - 1].shape
            u = resize_bilinear(u, nh, nw) * 2.0
            v = resize_bilinear(v, nh, nw) * 2.0
    return FlowField(u, v)


# ---------------------------------------------------------------------------
# Field post-processing towards CNN input
# ---------------------------------------------------------------------------


def fill_iframe_gaps(fields: Sequence[MotionField]) -> list[MotionField]:
    """Replace intra-frame holes with the most recent predicted field.

    An intra field with no earlier predicted field becomes all zeros.
    Idempotent: fields keep their frame-type tag, so a second pass
    recomputes the same fill.
    """
    out: list[MotionField] = []
    last_p: Optional[MotionField] = None
    for f in fields:
        if f.frame_type == FRAME_P:
            if f.vectors is None:
                raise ValueError("predicted frame without motion vectors")
            out.append(f.copy())
            last_p = f
        else:
            if last_p is not None:
                out.append(MotionField(FRAME_I, f.block_size, f.blocks_x, f.blocks_y,
                                       last_p.vectors.copy()))
            else:
                zeros = np.zeros((f.blocks_y, f.blocks_x, 2), dtype=np.int16)
                out.append(MotionField(FRAME_I, f.block_size, f.blocks_x, f.blocks_y, zeros))
    return out


def rasterize(field: MotionField, out_w: int, out_h: int) -> np.ndarray:
    """Expand a block field to a dense (2, out_h, out_w) float map.

    Every pixel inherits the (dx, dy) of its covering block; when the
    output size differs from the field's native pixel size the values are
    rescaled proportionally.
    """
    if out_w <= 0 or out_h <= 0:
        raise ValueError("output dimensions must be positive")
    if field.vectors is None:
        raise ValueError("cannot rasterize an unfilled intra field")
    bs = field.block_size
    native_w = field.blocks_x * bs
    native_h = field.blocks_y * bs
    vec = field.vectors.astype(np.float32)
    if (out_w, out_h) == (native_w, native_h):
        dense = np.repeat(np.repeat(vec, bs, axis=0), bs, axis=1)
    else:
        br = np.arange(out_h) * native_h // out_h // bs
        bc = np.arange(out_w) * native_w // out_w // bs
        dense = vec[br[:, None], bc[None, :], :]
        dense = dense * np.array([out_w / native_w, out_h / native_h], dtype=np.float32)
    return np.ascontiguousarray(dense.transpose(2, 0, 1))


def stack_inputs(maps: Sequence[np.ndarray], t0: int, stack_length: int = 10) -> np.ndarray:
    """Stack per-frame (2, H, W) maps into one (2L, H, W) CNN input.

    Channel order is [dx_t0, dy_t0, dx_t0+1, dy_t0+1, ...].
    """
    if t0 < 0 or t0 + stack_length > len(maps):
        raise ValueError(
            f"window [{t0}, {t0 + stack_length}) exceeds the {len(maps)}-frame sequence"
        )
    return np.concatenate([np.asarray(m) for m in maps[t0 : t0 + stack_length]], axis=0)


# ---------------------------------------------------------------------------
# Debug exports
# ---------------------------------------------------------------------------


def write_flow_raw(flow: FlowField, path) -> None:
    """Two raw little-endian f32 planes behind a u32 width/height header."""
    import struct

    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", flow.width, flow.height))
        fh.write(flow.u.astype("<f4").tobytes())
        fh.write(flow.v.astype("<f4").tobytes())


def read_flow_raw(path) -> FlowField:
    import struct

    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated flow file")
    w, h = struct.unpack_from("<II", raw, 0)
    need = 8 + 2 * 4 * w * h
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    u = np.frombuffer(raw, dtype="<f4", count=w * h, offset=8).reshape(h, w)
    v = np.frombuffer(raw, dtype="<f4", count=w * h, offset=8 + 4 * w * h).reshape(h, w)
    return FlowField(u.copy(), v.copy())


def export_field_pgm(field: MotionField, path_prefix) -> list[str]:
    """Write dx/dy channels as PGM images with a +128 grey offset."""
    from . import videoio

    dense = rasterize(field, field.blocks_x * field.block_size,
                      field.blocks_y * field.block_size)
    paths = []
    for name, plane in (("dx", dense[0]), ("dy", dense[1])):
        img = np.clip(plane + 128.0, 0, 255).astype(np.uint8)
        p = f"{path_prefix}_{name}.pgm"
        videoio.write_pgm(img, p)
        paths.append(p)
    return paths
