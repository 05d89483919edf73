"""Minimal CNN engine on numpy: layers, backprop, SGD, checkpoints.

Tensors are plain numpy arrays (NCHW for images, NF for dense features).
Gradients are returned as lists aligned with `Network.parameters()` rather
than being attached to arrays.  All float math runs in the dtype of the
parameters, so casting a network to float64 gives reference-precision
gradients for finite-difference checks.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class CheckpointError(ValueError):
    """Malformed NNW1 checkpoint; `reason` is one of magic/version/checksum/truncated."""

    def __init__(self, message: str, reason: str):
        super().__init__(message)
        self.reason = reason


@dataclass
class Param:
    name: str
    value: np.ndarray

    @property
    def shape(self):
        return self.value.shape


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


# ---------------------------------------------------------------------------
# Layers.  Each exposes params(), forward(x, ctx, train, rng) and
# backward(ctx, dy, need_dx) -> (dx or None, grads aligned with params()).
# ---------------------------------------------------------------------------


class Conv2d:
    """2-D convolution, channels-last internally: activations are (N, H, W, C)
    and the weight lives GEMM-ready as (KH, KW, C_in, C_out), so im2col copies
    contiguous (KW*C_in)-float runs and dy feeds the weight-gradient GEMM
    without any transpose."""

    kind = "conv"

    def __init__(self, name, in_ch, out_ch, ksize, stride, pad, rng=None):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.stride = stride
        self.pad = pad
        fan_in = in_ch * ksize * ksize
        if rng is None:
            w = np.zeros((ksize, ksize, in_ch, out_ch), np.float32)
        else:
            w = _he_normal(rng, (ksize, ksize, in_ch, out_ch), fan_in)
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(out_ch, np.float32))

    def params(self):
        return [self.weight, self.bias]

    def out_hw(self, h, w):
        k, s, p = self.ksize, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x, ctx, train, rng):
        if x.ndim != 4 or x.shape[3] != self.in_ch:
            raise ValueError(
                f"layer {self.name}: expected (N,H,W,{self.in_ch}) input, got {x.shape}"
            )
        k, s, p = self.ksize, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        n, hp, wp, c = xp.shape
        oh, ow = self.out_hw(x.shape[1], x.shape[2])
        s0, s1, s2, s3 = xp.strides
        patches = np.lib.stride_tricks.as_strided(
            xp, (n, oh, ow, k, k, c), (s0, s1 * s, s2 * s, s1, s2, s3), writeable=False
        )
        cols = np.ascontiguousarray(patches).reshape(n * oh * ow, k * k * c)
        wmat = self.weight.value.reshape(k * k * c, self.out_ch)
        y = (cols @ wmat + self.bias.value).reshape(n, oh, ow, self.out_ch)
        if train:
            ctx["cols"] = cols
            ctx["dims"] = (n, hp, wp, oh, ow)
        return y

    def backward(self, ctx, dy, need_dx=True):
        n, hp, wp, oh, ow = ctx["dims"]
        k, s, p, c = self.ksize, self.stride, self.pad, self.in_ch
        cols = ctx["cols"]
        dy2 = dy.reshape(n * oh * ow, self.out_ch)
        dw = (cols.T @ dy2).reshape(self.weight.value.shape)
        db = dy2.sum(axis=0)
        if not need_dx:
            return None, [dw, db]
        wmat = self.weight.value.reshape(k * k * c, self.out_ch)
        dcols = (dy2 @ wmat.T).reshape(n, oh, ow, k, k, c)
        dxp = np.zeros((n, hp, wp, c), dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * oh : s, j : j + s * ow : s, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, p : hp - p, p : wp - p, :] if p else dxp
        return np.ascontiguousarray(dx), [dw, db]

    def descriptor(self):
        return (self.in_ch, self.out_ch, self.ksize, self.stride, self.pad)


class MaxPool2:
    kind = "pool"

    def __init__(self, name):
        self.name = name

    def params(self):
        return []

    def forward(self, x, ctx, train, rng):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"layer {self.name}: spatial dims {h}x{w} must be even")
        if not train:
            # Inference needs no argmax bookkeeping; a plain windowed max
            # yields bit-identical values.
            return x.reshape(n, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))
        win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        win = np.ascontiguousarray(win).reshape(n, h // 2, w // 2, 4, c)
        idx = win.argmax(axis=3)
        ctx["idx"] = idx
        ctx["in_shape"] = x.shape
        return np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(self, ctx, dy, need_dx=True):
        n, h, w, c = ctx["in_shape"]
        grid = np.zeros((n, h // 2, w // 2, 4, c), dy.dtype)
        np.put_along_axis(grid, ctx["idx"][:, :, :, None, :], dy[:, :, :, None, :], axis=3)
        dx = grid.reshape(n, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(dx).reshape(n, h, w, c), []

    def descriptor(self):
        return ()


class ReLU:
    kind = "relu"

    def __init__(self, name):
        self.name = name

    def params(self):
        return []

    def forward(self, x, ctx, train, rng):
        if not train:
            return np.maximum(x, 0)
        ctx["mask"] = x > 0
        return np.where(ctx["mask"], x, 0)

    def backward(self, ctx, dy, need_dx=True):
        return np.where(ctx["mask"], dy, 0), []

    def descriptor(self):
        return ()


class PReLU:
    """Per-channel learnable negative slope; slope 0 reduces to ReLU exactly."""

    kind = "prelu"

    def __init__(self, name, channels, init=0.25):
        self.name = name
        self.channels = channels
        self.slope = Param(f"{name}.slope", np.full(channels, init, np.float32))

    def params(self):
        return [self.slope]

    def forward(self, x, ctx, train, rng):
        if x.shape[-1] != self.channels:
            raise ValueError(
                f"layer {self.name}: expected {self.channels} channels, got {x.shape[-1]}"
            )
        neg = x < 0
        if train:
            ctx["neg"] = neg
            ctx["x"] = x
        return np.where(neg, self.slope.value * x, x)

    def backward(self, ctx, dy, need_dx=True):
        neg, x = ctx["neg"], ctx["x"]
        da = np.where(neg, dy * x, 0).sum(axis=tuple(range(x.ndim - 1)))
        dx = np.where(neg, self.slope.value * dy, dy)
        return dx, [da]

    def descriptor(self):
        return (self.channels,)


class Flatten:
    kind = "flatten"

    def __init__(self, name):
        self.name = name

    def params(self):
        return []

    def forward(self, x, ctx, train, rng):
        ctx["in_shape"] = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, ctx, dy, need_dx=True):
        return dy.reshape(ctx["in_shape"]), []

    def descriptor(self):
        return ()


class Dense:
    kind = "dense"

    def __init__(self, name, in_features, out_features, rng=None):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            w = np.zeros((in_features, out_features), np.float32)
        else:
            w = _he_normal(rng, (in_features, out_features), in_features)
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(out_features, np.float32))

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, ctx, train, rng):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(
                f"layer {self.name}: expected (N,{self.in_features}) input, got {x.shape}"
            )
        ctx["x"] = x
        return x @ self.weight.value + self.bias.value

    def backward(self, ctx, dy, need_dx=True):
        x = ctx["x"]
        dw = x.T @ dy
        db = dy.sum(axis=0)
        dx = dy @ self.weight.value.T if need_dx else None
        return dx, [dw, db]

    def descriptor(self):
        return (self.in_features, self.out_features)


class Dropout:
    """Inverted dropout: kept units scaled by 1/(1-p) at train time, identity in eval."""

    kind = "dropout"

    def __init__(self, name, p=0.5):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout p={p} outside [0,1)")
        self.name = name
        self.p = p

    def params(self):
        return []

    def forward(self, x, ctx, train, rng):
        if not train or self.p == 0.0:
            ctx["mask"] = None
            return x
        mask = rng.random(x.shape) >= self.p
        ctx["mask"] = mask
        return np.where(mask, x / (1.0 - self.p), 0)

    def backward(self, ctx, dy, need_dx=True):
        mask = ctx["mask"]
        if mask is None:
            return dy, []
        return np.where(mask, dy / (1.0 - self.p), 0), []

    def descriptor(self):
        return (int(round(self.p * 1000)),)


_LAYER_KINDS = {
    "conv": Conv2d,
    "pool": MaxPool2,
    "relu": ReLU,
    "prelu": PReLU,
    "flatten": Flatten,
    "dense": Dense,
    "dropout": Dropout,
}
_KIND_CODES = {k: i for i, k in enumerate(sorted(_LAYER_KINDS))}
_CODE_KINDS = {i: k for k, i in _KIND_CODES.items()}


@dataclass
class Network:
    name: str
    layers: list
    input_hw: int
    in_channels: int
    num_classes: int
    version: int = 0

    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.params()]

    def bump(self) -> None:
        self.version += 1

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def checksum(self) -> int:
        crc = 0
        for p in self.parameters():
            crc = zlib.crc32(np.ascontiguousarray(p.value).tobytes(), crc)
        return crc

    def astype(self, dtype) -> "Network":
        """Structural copy with parameters cast to dtype (float64 for grad checks)."""
        other = _rebuild_structure(self)
        for dst, src in zip(other.parameters(), self.parameters()):
            dst.value = src.value.astype(dtype)
        return other

    def copy(self) -> "Network":
        other = _rebuild_structure(self)
        for dst, src in zip(other.parameters(), self.parameters()):
            dst.value = src.value.copy()
        return other


def _rebuild_structure(net: Network) -> Network:
    layers = []
    for layer in net.layers:
        cls = type(layer)
        if cls is Conv2d:
            layers.append(Conv2d(layer.name, *layer.descriptor()))
        elif cls is Dense:
            layers.append(Dense(layer.name, *layer.descriptor()))
        elif cls is PReLU:
            layers.append(PReLU(layer.name, layer.channels))
        elif cls is Dropout:
            layers.append(Dropout(layer.name, layer.p))
        else:
            layers.append(cls(layer.name))
    return Network(net.name, layers, net.input_hw, net.in_channels, net.num_classes)


@dataclass
class ForwardCache:
    version: int
    mode: str
    contexts: list


def forward(net: Network, x: np.ndarray, mode: str = "eval",
            rng_seed: Optional[int] = None):
    """Run the network; returns (logits, cache).  Deterministic given
    (params, input, mode, seed); dropout draws only in train mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != net.in_channels or x.shape[2] != net.input_hw \
            or x.shape[3] != net.input_hw:
        raise ValueError(
            f"{net.name}: expected input (N,{net.in_channels},{net.input_hw},"
            f"{net.input_hw}), got {x.shape}"
        )
    train = mode == "train"
    rng = np.random.default_rng(0 if rng_seed is None else rng_seed)
    x = np.ascontiguousarray(x.transpose(0, 2, 3, 1))  # channels-last internally
    contexts = []
    for layer in net.layers:
        ctx = {}
        x = layer.forward(x, ctx, train, rng)
        contexts.append(ctx)
    return x, ForwardCache(net.version, mode, contexts)


def backward(net: Network, cache: ForwardCache, loss_grad: np.ndarray) -> list:
    """Backprop; returns gradients aligned with net.parameters()."""
    if cache.version != net.version:
        raise ValueError(
            f"{net.name}: stale cache (version {cache.version}, net at {net.version})"
        )
    if cache.mode != "train":
        raise ValueError(f"{net.name}: backward requires a train-mode forward cache")
    dy = np.asarray(loss_grad)
    grads_rev = []
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        need_dx = i > 0
        dy, gs = layer.backward(cache.contexts[i], dy, need_dx)
        grads_rev.append(gs)
    grads = []
    for gs in reversed(grads_rev):
        grads.extend(gs)
    return grads


@dataclass(frozen=True)
class LrSchedule:
    initial: float
    drops: tuple = ()  # of (step, new_rate), steps strictly increasing
    stop_step: int = 0

    def __post_init__(self):
        if self.initial <= 0:
            raise ValueError("initial rate must be positive")
        prev = -1
        for step, rate in self.drops:
            if step <= prev:
                raise ValueError("drop steps must be strictly increasing")
            if rate <= 0:
                raise ValueError("rates must be positive")
            prev = step

    def lr_at(self, step: int) -> float:
        lr = self.initial
        for s, rate in self.drops:
            if step >= s:
                lr = rate
        return lr

    @classmethod
    def staged(cls, total_steps: int, base_lr: float) -> "LrSchedule":
        """Base rate with x0.1 drops at 60% and 85% of the run."""
        return cls(
            base_lr,
            ((int(total_steps * 0.6), base_lr * 0.1),
             (int(total_steps * 0.85), base_lr * 0.01)),
            total_steps,
        )


@dataclass
class OptimState:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict = field(default_factory=dict)

    @classmethod
    def for_net(cls, net: Network, momentum=0.9, weight_decay=5e-4) -> "OptimState":
        vel = {p.name: np.zeros_like(p.value) for p in net.parameters()}
        return cls(momentum, weight_decay, vel)


def sgd_step(net: Network, grads: list, state: OptimState,
             schedule: LrSchedule, step: int) -> None:
    """v <- mu*v - lr*(g + wd*w); w <- w + v.  Mutates net and state in place."""
    params = net.parameters()
    if len(grads) != len(params):
        raise ValueError(f"got {len(grads)} grads for {len(params)} parameters")
    lr = schedule.lr_at(step)
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise ValueError(f"{p.name}: grad shape {g.shape} != param {p.value.shape}")
        v = state.velocity[p.name]
        v *= state.momentum
        v -= lr * (g + state.weight_decay * p.value)
        p.value += v
    net.bump()


def build_mini_two_stream(input_hw: int, in_channels: int, num_classes: int,
                          activation: str = "relu", seed: int = 0,
                          dropout_p: float = 0.5, name: str = "") -> Network:
    """Small conv-pool-FC classifier for square inputs of at least 32 px.

    conv 7x7/s2/32 -> pool -> conv 5x5/s1/64 -> pool -> conv 3x3/s1/96 -> pool
    -> FC 256 -> dropout -> FC num_classes, with ReLU (appearance stream) or
    PReLU (motion stream) after every conv and the first FC.
    """
    if input_hw < 32:
        raise ValueError(f"input_hw {input_hw} below minimum 32")
    if activation not in ("relu", "prelu"):
        raise ValueError(f"activation must be relu or prelu, got {activation!r}")
    rng = np.random.default_rng(seed)

    def act(tag, channels):
        if activation == "prelu":
            return PReLU(f"act{tag}", channels)
        return ReLU(f"act{tag}")

    layers = [Conv2d("conv1", in_channels, 32, 7, 2, 3, rng), act(1, 32), MaxPool2("pool1"),
              Conv2d("conv2", 32, 64, 5, 1, 2, rng), act(2, 64), MaxPool2("pool2"),
              Conv2d("conv3", 64, 96, 3, 1, 1, rng), act(3, 96), MaxPool2("pool3")]
    h = w = input_hw
    for layer in layers:
        if isinstance(layer, Conv2d):
            h, w = layer.out_hw(h, w)
        elif isinstance(layer, MaxPool2):
            if h % 2 or w % 2:
                raise ValueError(f"input_hw {input_hw}: odd spatial dim before {layer.name}")
            h, w = h // 2, w // 2
    flat = 96 * h * w
    layers += [Flatten("flat"), Dense("fc1", flat, 256, rng), act(4, 256),
               Dropout("drop1", dropout_p), Dense("fc2", 256, num_classes, rng)]
    return Network(name or f"mini_{activation}", layers, input_hw, in_channels, num_classes)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64 if np.asarray(logits).dtype == np.float64
                   else np.float32)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax requires finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# NNW1 checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"NNW1"
CKPT_VERSION = 1


def checkpoint_bytes(net: Network) -> bytes:
    out = [struct.pack("<4sH", CKPT_MAGIC, CKPT_VERSION)]
    name_b = net.name.encode("utf-8")
    out.append(struct.pack("<H", len(name_b)))
    out.append(name_b)
    out.append(struct.pack("<HHHH", net.input_hw, net.in_channels, net.num_classes,
                           len(net.layers)))
    for layer in net.layers:
        desc = layer.descriptor()
        out.append(struct.pack("<BB", _KIND_CODES[layer.kind], len(desc)))
        for v in desc:
            out.append(struct.pack("<I", v))
    for p in net.parameters():
        val = np.ascontiguousarray(p.value, dtype=np.float32)
        out.append(struct.pack("<B", val.ndim))
        for d in val.shape:
            out.append(struct.pack("<I", d))
        out.append(val.tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def save_weights(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def network_from_bytes(raw: bytes) -> Network:
    if len(raw) < 10:
        raise CheckpointError("file too short for an NNW1 header", "truncated")
    magic, version = struct.unpack_from("<4sH", raw, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", "magic")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version}", "version")
    stored = struct.unpack_from("<I", raw, len(raw) - 4)[0]
    if zlib.crc32(raw[:-4]) != stored:
        raise CheckpointError("checksum mismatch", "checksum")
    off = 6
    try:
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        input_hw, in_ch, num_classes, n_layers = struct.unpack_from("<HHHH", raw, off)
        off += 8
        layers = []
        idx = {"conv": 0, "dense": 0, "prelu": 0, "relu": 0, "pool": 0,
               "flatten": 0, "dropout": 0}
        for _ in range(n_layers):
            code, ndesc = struct.unpack_from("<BB", raw, off)
            off += 2
            desc = struct.unpack_from(f"<{ndesc}I", raw, off) if ndesc else ()
            off += 4 * ndesc
            kind = _CODE_KINDS[code]
            idx[kind] += 1
            lname = f"{kind}{idx[kind]}"
            if kind == "conv":
                layers.append(Conv2d(lname, *desc))
            elif kind == "dense":
                layers.append(Dense(lname, *desc))
            elif kind == "prelu":
                layers.append(PReLU(lname, desc[0]))
            elif kind == "dropout":
                layers.append(Dropout(lname, desc[0] / 1000.0))
            else:
                layers.append(_LAYER_KINDS[kind](lname))
        net = Network(name, layers, input_hw, in_ch, num_classes)
        for p in net.parameters():
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            p.value = np.frombuffer(raw, np.float32, count, off).reshape(shape).copy()
            off += 4 * count
    except (struct.error, IndexError) as exc:
        raise CheckpointError(f"descriptor table cut short: {exc}", "truncated") from exc
    if off != len(raw) - 4:
        raise CheckpointError("trailing bytes after parameter data", "truncated")
    return net


def load_weights(path) -> Network:
    return network_from_bytes(Path(path).read_bytes())
