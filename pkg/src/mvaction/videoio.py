"""Frame/clip types, the MotionShapes dataset generator, and the MVS1 container.

The container emulates the decode side of a motion-compensated codec: luma
planes are stored verbatim and every predicted frame carries one motion
vector per macroblock, found at encode time by the three-step search.
Reading the vectors back is pure deserialization, which is what makes the
decode side cheap.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import motion
from .motion import FRAME_I, FRAME_P, MotionField

MAGIC = b"MVS1"
VERSION = 1

CLASS_NAMES = (
    "translate_left",
    "translate_right",
    "translate_up",
    "translate_down",
    "rotate_cw",
    "rotate_ccw",
    "zoom_in",
    "zoom_out",
)

# Class remap under horizontal mirroring; motion directions are part of the
# label here, unlike in natural-video action classes.
HFLIP_CLASS_MAP = {0: 1, 1: 0, 2: 2, 3: 3, 4: 5, 5: 4, 6: 6, 7: 7}


class ContainerError(ValueError):
    """Malformed MVS1 container; `reason` is one of magic/version/checksum/truncated/empty."""

    def __init__(self, message: str, reason: str):
        super().__init__(message)
        self.reason = reason


class DecodeError(ValueError):
    """Payload record could not be parsed; carries the failing frame index."""

    def __init__(self, message: str, frame_index: int):
        super().__init__(message)
        self.frame_index = frame_index


@dataclass
class Frame:
    """Single video frame: luma plane plus optional half-resolution chroma."""

    luma: np.ndarray
    chroma_u: Optional[np.ndarray] = None
    chroma_v: Optional[np.ndarray] = None

    def __post_init__(self):
        self.luma = np.asarray(self.luma, dtype=np.uint8)
        if self.luma.ndim != 2:
            raise ValueError("luma must be a 2-D plane")

    @property
    def height(self) -> int:
        return self.luma.shape[0]

    @property
    def width(self) -> int:
        return self.luma.shape[1]


@dataclass
class Clip:
    frames: list[Frame]
    label: int
    fps_nominal: float = 25.0
    clip_id: str = ""

    def __post_init__(self):
        if self.frames:
            w, h = self.frames[0].width, self.frames[0].height
            for i, f in enumerate(self.frames):
                if (f.width, f.height) != (w, h):
                    raise ValueError(f"frame {i} has mismatched dimensions")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class GopConfig:
    gop_length: int = 8
    block_size: int = 16
    search_range: int = 7

    def __post_init__(self):
        if self.gop_length < 2:
            raise ValueError("gop_length must be at least 2")
        if self.block_size not in (8, 16):
            raise ValueError("block_size must be 8 or 16")
        if self.search_range < 1 or self.search_range > 127:
            raise ValueError("search_range out of range")


@dataclass(frozen=True)
class ContainerHeader:
    width: int
    height: int
    gop: GopConfig
    frame_count: int
    frame_types: tuple  # of "I"/"P"

    @property
    def blocks_x(self) -> int:
        return self.width // self.gop.block_size

    @property
    def blocks_y(self) -> int:
        return self.height // self.gop.block_size

    @property
    def mv_record_bytes(self) -> int:
        return 2 * self.blocks_x * self.blocks_y


@dataclass
class CompressedClip:
    """Header plus the raw byte payload of interleaved luma planes and MV records."""

    header: ContainerHeader
    payload: bytes
    label: int = -1
    clip_id: str = ""


@dataclass
class DatasetManifest:
    class_names: tuple
    splits: dict  # clip_id -> "train" | "test"
    seed: int
    flip_classes: dict = field(default_factory=lambda: dict(HFLIP_CLASS_MAP))

    def clip_ids(self, split: str) -> list[str]:
        return sorted(cid for cid, s in self.splits.items() if s == split)

    def to_json(self) -> str:
        return json.dumps(
            {
                "class_names": list(self.class_names),
                "splits": self.splits,
                "seed": self.seed,
                "flip_classes": {str(k): v for k, v in self.flip_classes.items()},
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        flip = {int(k): v for k, v in d.get("flip_classes", {}).items()}
        return cls(tuple(d["class_names"]), dict(d["splits"]), int(d["seed"]), flip)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# MotionShapes dataset
# ---------------------------------------------------------------------------


def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    gh = h // cell + 2
    gw = w // cell + 2
    grid = rng.random((gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(np.intp)
    x0 = xs.astype(np.intp)
    fy = (ys - y0)[:, None]
    fx = xs - x0
    top = grid[y0, :][:, x0] * (1 - fx) + grid[y0, :][:, x0 + 1] * fx
    bot = grid[y0 + 1, :][:, x0] * (1 - fx) + grid[y0 + 1, :][:, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _smooth_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Band-limited random texture in [40, 215]; smooth enough for block search."""
    t = 0.65 * _value_noise(rng, h, w, 10) + 0.35 * _value_noise(rng, h, w, 4)
    t -= t.min()
    peak = t.max()
    if peak > 0:
        t /= peak
    return 40.0 + 175.0 * t


def _wrap_centered(rel: np.ndarray, size: int) -> np.ndarray:
    return (rel + size / 2.0) % size - size / 2.0


def _sample_wrapped(tex: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear sample with toroidal wrap (for sub-pixel whole-frame shifts)."""
    h, w = tex.shape
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    x0 %= w
    y0 %= h
    x1 = (x0 + 1) % w
    y1 = (y0 + 1) % h
    top = tex[y0, x0] * (1 - fx) + tex[y0, x1] * fx
    bot = tex[y1, x0] * (1 - fx) + tex[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _sample_tex(tex: np.ndarray, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
    n = tex.shape[0]
    txs = np.clip(lx + n / 2.0, 0.0, n - 1.001)
    tys = np.clip(ly + n / 2.0, 0.0, n - 1.001)
    x0 = txs.astype(np.intp)
    y0 = tys.astype(np.intp)
    fx = txs - x0
    fy = tys - y0
    return (tex[y0, x0] * (1 - fx) + tex[y0, x0 + 1] * fx) * (1 - fy) \
        + (tex[y0 + 1, x0] * (1 - fx) + tex[y0 + 1, x0 + 1] * fx) * fy


@dataclass
class _ShapeParams:
    cx: float
    cy: float
    radius: float
    aspect: float
    tex: np.ndarray
    brightness: float


def _draw_shapes(rng: np.random.Generator, size: int, count: int = 2) -> list:
    """Shape/texture parameters; the same draws are made regardless of class."""
    shapes = []
    for k in range(count):
        for _ in range(24):
            cx = rng.uniform(0.0, size)
            cy = rng.uniform(0.0, size)
            far = all(
                math.hypot(_wrap_centered(np.array(cx - s.cx), size),
                           _wrap_centered(np.array(cy - s.cy), size)) >= 30.0
                for s in shapes
            )
            if far:
                break
        shapes.append(_ShapeParams(
            cx=cx,
            cy=cy,
            radius=rng.uniform(12.0, 16.0),
            aspect=rng.uniform(0.85, 1.18),
            tex=_smooth_texture(rng, 4 * size, 4 * size),
            brightness=rng.uniform(-25.0, 25.0),
        ))
    return shapes


def _render_clip(rng: np.random.Generator, label: int, resolution: int, clip_length: int,
                 clip_id: str, fps: float = 25.0) -> Clip:
    size = resolution
    bg = _smooth_texture(rng, size, size)
    shapes = _draw_shapes(rng, size)

    # Motion magnitudes sit deliberately near the 1 px/frame matching
    # threshold: integer block vectors come out sparse and flickery while
    # sub-pixel dense flow still resolves the motion cleanly, which is the
    # contrast the temporal streams are meant to expose.
    speed = rng.uniform(0.50, 0.85)
    omega = math.radians(rng.uniform(4.5, 6.5))
    growth = rng.uniform(0.022, 0.032)

    # Camera shake: zero-mean sub-pixel scene offsets, identical draws for
    # every class.  Block vectors quantize the shake into whole-frame +/-1
    # flicker that masks the object signal; dense flow reads it as a smooth
    # global field and keeps the object motion cleanly separable.
    jx = np.clip(rng.normal(0.0, 1.15, clip_length), -2.5, 2.5)
    jy = np.clip(rng.normal(0.0, 1.15, clip_length), -2.5, 2.5)

    name = CLASS_NAMES[label]
    vx = vy = spin = 0.0
    scale_rate = 1.0
    if name == "translate_left":
        vx = -speed
    elif name == "translate_right":
        vx = speed
    elif name == "translate_up":
        vy = -speed
    elif name == "translate_down":
        vy = speed
    elif name == "rotate_cw":
        spin = omega
    elif name == "rotate_ccw":
        spin = -omega
    elif name == "zoom_in":
        scale_rate = 1.0 + growth
    else:  # zoom_out
        scale_rate = 1.0 / (1.0 + growth)

    gy, gx = np.mgrid[0:size, 0:size].astype(np.float64)
    frames = []
    for t in range(clip_length):
        img = _sample_wrapped(bg, gx - jx[t], gy - jy[t])
        ang = spin * t
        s = scale_rate ** t
        ca, sa = math.cos(-ang), math.sin(-ang)
        for sh in shapes:
            rx = _wrap_centered(gx - (sh.cx + vx * t + jx[t]), size)
            ry = _wrap_centered(gy - (sh.cy + vy * t + jy[t]), size)
            lx = (ca * rx - sa * ry) / s
            ly = (sa * rx + ca * ry) / s
            q = np.sqrt((lx / sh.radius) ** 2 + (ly / (sh.radius * sh.aspect)) ** 2)
            edge = 1.2 / sh.radius
            mask = np.clip((1.0 + edge - q) / (2.0 * edge), 0.0, 1.0)
            if not mask.any():
                continue
            sample = _sample_tex(sh.tex, lx, ly) + sh.brightness
            img = img * (1.0 - mask) + sample * mask
        img = img + rng.normal(0.0, 2.0, img.shape)  # sensor noise
        frames.append(Frame(np.clip(img + 0.5, 0, 255).astype(np.uint8)))
    return Clip(frames, label, fps, clip_id)


def generate_motionshapes(seed: int, num_clips_per_class: int, resolution: int,
                          clip_length: int) -> tuple[DatasetManifest, list[Clip]]:
    """Synthesize the 8-class moving-shapes dataset.

    Classes differ only in the motion applied to a textured shape over a
    textured background (4 translations, 2 rotations, 2 zooms); shape and
    texture statistics are drawn identically for every class, so the pixel
    appearance carries no label information.  Fully deterministic per seed.
    """
    if resolution % 16 != 0 or resolution <= 0:
        raise ValueError(f"resolution {resolution} must be a positive multiple of 16")
    if clip_length < 16:
        raise ValueError(f"clip_length {clip_length} must be at least 16")
    if num_clips_per_class < 1:
        raise ValueError("need at least one clip per class")

    children = np.random.SeedSequence(seed).spawn(len(CLASS_NAMES) * num_clips_per_class)
    clips: list[Clip] = []
    splits: dict[str, str] = {}
    n_train = max(1, int(round(num_clips_per_class * 0.8)))
    if num_clips_per_class > 1:
        n_train = min(n_train, num_clips_per_class - 1)
    idx = 0
    for label, name in enumerate(CLASS_NAMES):
        for i in range(num_clips_per_class):
            clip_id = f"{name}_{i:03d}"
            rng = np.random.default_rng(children[idx])
            clips.append(_render_clip(rng, label, resolution, clip_length, clip_id))
            splits[clip_id] = "train" if i < n_train else "test"
            idx += 1
    manifest = DatasetManifest(CLASS_NAMES, splits, seed)
    return manifest, clips


# ---------------------------------------------------------------------------
# Encode / decode
# ---------------------------------------------------------------------------


def frame_types_for(count: int, gop_length: int) -> tuple:
    return tuple(FRAME_I if i % gop_length == 0 else FRAME_P for i in range(count))


def encode(clip: Clip, cfg: GopConfig = GopConfig()) -> CompressedClip:
    """Emulated encode: verbatim luma plus three-step-search MVs per P-frame."""
    if not clip.frames:
        raise ValueError("cannot encode an empty clip")
    w, h = clip.frames[0].width, clip.frames[0].height
    if w % cfg.block_size or h % cfg.block_size:
        raise ValueError(
            f"clip dimensions {w}x{h} are not a multiple of block size {cfg.block_size}"
        )
    types = frame_types_for(len(clip.frames), cfg.gop_length)
    chunks = []
    for i, (frame, ftype) in enumerate(zip(clip.frames, types)):
        chunks.append(frame.luma.tobytes())
        if ftype == FRAME_P:
            fld = motion.search_frame(frame.luma, clip.frames[i - 1].luma,
                                      cfg.block_size, cfg.search_range)
            chunks.append(fld.vectors.astype(np.int8).tobytes())
    header = ContainerHeader(w, h, cfg, len(clip.frames), types)
    return CompressedClip(header, b"".join(chunks), clip.label, clip.clip_id)


def decode_motion_vectors(cc: CompressedClip) -> list[MotionField]:
    """Deserialize per-frame motion fields; performs no block search.

    Intra frames yield an unfilled field (vectors None).
    """
    hdr = cc.header
    plane = hdr.width * hdr.height
    bx, by = hdr.blocks_x, hdr.blocks_y
    rec = hdr.mv_record_bytes
    payload = cc.payload
    fields: list[MotionField] = []
    off = 0
    for i, ftype in enumerate(hdr.frame_types):
        if off + plane > len(payload):
            raise DecodeError(f"frame {i}: truncated luma plane", i)
        off += plane
        if ftype == FRAME_P:
            if off + rec > len(payload):
                raise DecodeError(f"frame {i}: truncated motion record", i)
            vec = np.frombuffer(payload, dtype=np.int8, count=rec, offset=off)
            fields.append(MotionField(FRAME_P, hdr.gop.block_size, bx, by,
                                      vec.reshape(by, bx, 2).astype(np.int16)))
            off += rec
        else:
            fields.append(MotionField(FRAME_I, hdr.gop.block_size, bx, by, None))
    return fields


def decode_frames(cc: CompressedClip) -> list[Frame]:
    hdr = cc.header
    plane = hdr.width * hdr.height
    rec = hdr.mv_record_bytes
    payload = cc.payload
    frames: list[Frame] = []
    off = 0
    for i, ftype in enumerate(hdr.frame_types):
        if off + plane > len(payload):
            raise DecodeError(f"frame {i}: truncated luma plane", i)
        luma = np.frombuffer(payload, dtype=np.uint8, count=plane, offset=off)
        frames.append(Frame(luma.reshape(hdr.height, hdr.width).copy()))
        off += plane
        if ftype == FRAME_P:
            off += rec
    return frames


def decoded_clip(cc: CompressedClip) -> Clip:
    return Clip(decode_frames(cc), cc.label, clip_id=cc.clip_id)


# ---------------------------------------------------------------------------
# Container file format
# ---------------------------------------------------------------------------


def container_bytes(cc: CompressedClip) -> bytes:
    hdr = cc.header
    if hdr.frame_count == 0:
        raise ContainerError("refusing to write a container with no frames", "empty")
    head = struct.pack(
        "<4sHHHHHHI",
        MAGIC,
        VERSION,
        hdr.width,
        hdr.height,
        hdr.gop.block_size,
        hdr.gop.gop_length,
        hdr.gop.search_range,
        hdr.frame_count,
    )
    types = bytes(0 if t == FRAME_I else 1 for t in hdr.frame_types)
    body = head + types + cc.payload
    return body + struct.pack("<I", zlib.crc32(body))


def write_container(cc: CompressedClip, path) -> None:
    Path(path).write_bytes(container_bytes(cc))


def parse_container(raw: bytes, label: int = -1, clip_id: str = "") -> CompressedClip:
    head_size = struct.calcsize("<4sHHHHHHI")
    if len(raw) < head_size + 4:
        raise ContainerError("file too short for an MVS1 header", "truncated")
    magic, version, w, h, bs, gop_len, sr, count = struct.unpack_from("<4sHHHHHHI", raw, 0)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}", "magic")
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}", "version")
    stored_crc = struct.unpack_from("<I", raw, len(raw) - 4)[0]
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise ContainerError("checksum mismatch", "checksum")
    off = head_size
    if off + count > len(raw) - 4:
        raise ContainerError("frame type table truncated", "truncated")
    types = tuple(FRAME_I if b == 0 else FRAME_P for b in raw[off : off + count])
    header = ContainerHeader(w, h, GopConfig(gop_len, bs, sr), count, types)
    payload = raw[off + count : len(raw) - 4]
    expected = count * w * h + sum(1 for t in types if t == FRAME_P) * header.mv_record_bytes
    if len(payload) != expected:
        raise ContainerError(
            f"payload is {len(payload)} bytes, header implies {expected}", "truncated"
        )
    return CompressedClip(header, payload, label, clip_id)


def read_container(path) -> CompressedClip:
    raw = Path(path).read_bytes()
    cc = parse_container(raw)
    cc.clip_id = Path(path).stem
    return cc


# ---------------------------------------------------------------------------
# PGM image output (debug/visualization)
# ---------------------------------------------------------------------------


def write_pgm(img: np.ndarray, path) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError("PGM output needs a 2-D array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    parts = raw.split(b"\n", 3)
    w, h = (int(x) for x in parts[1].split())
    data = parts[3][: w * h]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
