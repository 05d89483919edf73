"""End-to-end two-stream training and evaluation on the MotionShapes set.

Wires the pieces together: clips are encoded so their block motion can be
decoded back cheaply, dense flow is estimated per transition and cached,
both are rasterized into stacked 20-channel windows, and the teacher /
student / fused evaluations all run off the same prepared arrays.

A horizontal flip changes the meaning of direction-defined classes
(translate left/right swap, the rotations swap), so augmentation returns
the transformed label alongside the transformed tensor; the class remap
comes from the dataset manifest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import distill, motion, nn, videoio


@dataclass(frozen=True)
class AugmentConfig:
    scales: tuple = (1.0, 0.875, 0.75)
    flip_prob: float = 0.5

    def __post_init__(self):
        if not self.scales or any(not 0 < s <= 1 for s in self.scales):
            raise ValueError(f"scales must lie in (0,1]: {self.scales}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError(f"flip_prob outside [0,1]: {self.flip_prob}")


@dataclass(frozen=True)
class AugmentParams:
    crop_w: int
    crop_h: int
    x0: int
    y0: int
    flip: bool


@dataclass(frozen=True)
class FusionWeights:
    spatial: float = 1.0
    temporal: float = 2.0

    def __post_init__(self):
        if self.spatial < 0 or self.temporal < 0 or self.spatial + self.temporal == 0:
            raise ValueError(f"weights must be non-negative and not both zero: {self}")


@dataclass
class EvalReport:
    confusion: np.ndarray  # (k, k) rows=true, cols=predicted
    clips_evaluated: int
    clips_skipped: int = 0

    @property
    def overall_accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    @property
    def per_class_accuracy(self) -> np.ndarray:
        counts = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            acc = np.where(counts > 0, np.diag(self.confusion) / counts, 0.0)
        return acc


def draw_augment(cfg: AugmentConfig, height: int, width: int,
                 rng: np.random.Generator) -> AugmentParams:
    scale = cfg.scales[rng.integers(0, len(cfg.scales))]
    ch = max(1, int(round(height * scale)))
    cw = max(1, int(round(width * scale)))
    x0 = int(rng.integers(0, width - cw + 1))
    y0 = int(rng.integers(0, height - ch + 1))
    flip = bool(rng.random() < cfg.flip_prob)
    return AugmentParams(cw, ch, x0, y0, flip)


def apply_augment(sample: np.ndarray, params: AugmentParams, out_hw: int,
                  motion_channels: bool) -> np.ndarray:
    """Crop/resize/flip a (C,H,W) stack; identical window across all channels.

    For motion stacks a horizontal flip negates the dx channels (the even
    channel indices) so the vectors keep pointing at the mirrored content.
    """
    c, h, w = sample.shape
    if params.crop_h > h or params.crop_w > w:
        raise ValueError(
            f"crop {params.crop_w}x{params.crop_h} exceeds sample {w}x{h}"
        )
    win = sample[:, params.y0 : params.y0 + params.crop_h,
                 params.x0 : params.x0 + params.crop_w]
    if win.shape[1:] != (out_hw, out_hw):
        win = motion.resize_bilinear(win.astype(np.float32), out_hw, out_hw)
    out = np.ascontiguousarray(win, dtype=np.float32)
    if params.flip:
        out = out[:, :, ::-1].copy()
        if motion_channels:
            out[0::2] = -out[0::2]
    return out


def augment_train(sample: np.ndarray, cfg: AugmentConfig, seed: int,
                  motion_channels: bool = True) -> np.ndarray:
    """Seeded random scale-crop-resize-flip for one training sample."""
    rng = np.random.default_rng(seed)
    params = draw_augment(cfg, sample.shape[1], sample.shape[2], rng)
    return apply_augment(sample, params, sample.shape[1], motion_channels)


def augment_test(sample: np.ndarray) -> np.ndarray:
    """Deterministic center crop at scale 1.0 (identity for exact-size input)."""
    c, h, w = sample.shape
    side = min(h, w)
    y0 = (h - side) // 2
    x0 = (w - side) // 2
    return np.ascontiguousarray(
        sample[:, y0 : y0 + side, x0 : x0 + side], dtype=np.float32
    )


# ---------------------------------------------------------------------------
# Clip preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedClip:
    clip_id: str
    label: int
    split: str
    frames: np.ndarray        # (T, H, W) uint8 luma
    mv_fields: np.ndarray     # (T-1, by, bx, 2) int8 gap-filled block motion
    block_size: int
    flow: Optional[np.ndarray] = None  # (T-1, 2, H, W) float16 dense motion
    _mv_raster: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    @property
    def transitions(self) -> int:
        return self.mv_fields.shape[0]

    @property
    def hw(self) -> int:
        return self.frames.shape[1]

    @property
    def mv_raster(self) -> np.ndarray:
        """Dense (T-1, 2, H, W) int8 view of the block field at native size,
        built once on first use so training epochs stop re-rasterizing."""
        if self._mv_raster is None:
            bs = self.block_size
            dense = np.repeat(np.repeat(self.mv_fields, bs, axis=1), bs, axis=2)
            self._mv_raster = np.ascontiguousarray(dense.transpose(0, 3, 1, 2))
        return self._mv_raster


def _clip_flow(clip: videoio.Clip, cache_dir: Optional[Path]) -> np.ndarray:
    t_count = len(clip.frames) - 1
    h, w = clip.frames[0].luma.shape
    out = np.empty((t_count, 2, h, w), np.float16)
    cdir = None
    if cache_dir is not None:
        cdir = Path(cache_dir) / clip.clip_id
        cdir.mkdir(parents=True, exist_ok=True)
    for t in range(t_count):
        path = cdir / f"{t:04d}.flow" if cdir else None
        if path is not None and path.exists():
            fl = motion.read_flow_raw(path)
        else:
            fl = motion.estimate_flow(clip.frames[t].luma, clip.frames[t + 1].luma)
            if path is not None:
                motion.write_flow_raw(fl, path)
        out[t, 0] = fl.u.astype(np.float16)
        out[t, 1] = fl.v.astype(np.float16)
    return out


def prepare_clip(clip: videoio.Clip, split: str, gop: videoio.GopConfig,
                 with_flow: bool = True, flow_cache: Optional[Path] = None) -> PreparedClip:
    cc = videoio.encode(clip, gop)
    fields = motion.fill_iframe_gaps(videoio.decode_motion_vectors(cc))
    mv = np.stack([f.vectors for f in fields[1:]]).astype(np.int8)
    frames = np.stack([f.luma for f in clip.frames])
    flow = _clip_flow(clip, flow_cache) if with_flow else None
    return PreparedClip(clip.clip_id, clip.label, split, frames, mv,
                        gop.block_size, flow)


def prepare_dataset(manifest: videoio.DatasetManifest, clips: Sequence[videoio.Clip],
                    gop: videoio.GopConfig, with_flow: bool = True,
                    flow_cache=None, threads: int = 1) -> dict:
    """Encode/decode motion and estimate flow for every clip, keyed by id."""
    cache = Path(flow_cache) if flow_cache else None

    def work(clip):
        return prepare_clip(clip, manifest.splits[clip.clip_id], gop, with_flow, cache)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            prepared = list(pool.map(work, clips))
    else:
        prepared = [work(c) for c in clips]
    return {p.clip_id: p for p in prepared}


def window_stack(prep: PreparedClip, t0: int, stack_length: int,
                 modality: str, search_range: int = 7) -> np.ndarray:
    """(2L, H, W) float32 input window, values scaled to about [-1, 1]."""
    hw = prep.hw
    if modality == "mv":
        by, bx = prep.mv_fields.shape[1:3]
        if (by * prep.block_size, bx * prep.block_size) == (hw, hw):
            window = prep.mv_raster[t0 : t0 + stack_length].reshape(-1, hw, hw)
            return window.astype(np.float32) / float(search_range)
        maps = []
        for t in range(t0, t0 + stack_length):
            fld = motion.MotionField(motion.FRAME_P, prep.block_size,
                                     prep.mv_fields.shape[2], prep.mv_fields.shape[1],
                                     prep.mv_fields[t].astype(np.int16))
            maps.append(motion.rasterize(fld, hw, hw))
        return motion.stack_inputs(maps, 0, stack_length) / float(search_range)
    if modality == "flow":
        if prep.flow is None:
            raise ValueError(f"{prep.clip_id}: flow not prepared")
        window = prep.flow[t0 : t0 + stack_length].astype(np.float32)
        return window.reshape(-1, hw, hw) / float(search_range)
    if modality == "rgb":
        frame = prep.frames[min(t0 + stack_length // 2, len(prep.frames) - 1)]
        plane = frame.astype(np.float32) / 255.0 - 0.5
        return np.repeat(plane[None], 3, axis=0)
    raise ValueError(f"unknown modality {modality!r}")


# ---------------------------------------------------------------------------
# Training streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    steps: int = 3000
    teacher_steps: int = 3000
    batch_size: int = 8
    stack_length: int = 10
    eval_stride: int = 4
    block_size: int = 8
    gop_length: int = 8
    search_range: int = 7
    temperature: float = 2.0
    w: Optional[float] = None
    scratch_lr: float = 1e-2
    finetune_lr: float = 1e-3
    teacher_lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dropout: float = 0.5
    augment: AugmentConfig = AugmentConfig()

    @property
    def gop(self) -> videoio.GopConfig:
        return videoio.GopConfig(self.gop_length, self.block_size, self.search_range)

    def lr_for(self, strategy: str) -> float:
        # Every teacher-supervised run uses the reduced rate: the soft+hard
        # loss (w ~ Temp^2) amplifies gradient magnitudes enough that the
        # from-scratch rate overshoots even from random init.
        return self.scratch_lr if strategy == "scratch" else self.finetune_lr


def batch_stream(prepared: Sequence[PreparedClip], cfg: ExperimentConfig,
                 modality: str, seed: int, with_teacher: bool = False,
                 flip_map: Optional[dict] = None):
    """Endless seeded batch generator: each epoch visits every training clip
    once at one random window, with fresh crop/flip draws shared between the
    student's and the teacher's modalities."""
    rng = np.random.default_rng(seed)
    flip_map = flip_map or {}
    hw = prepared[0].hw
    n = len(prepared)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            xs, ts, labels = [], [], []
            for idx in order[start : start + cfg.batch_size]:
                prep = prepared[idx]
                t0 = int(rng.integers(0, prep.transitions - cfg.stack_length + 1))
                params = draw_augment(cfg.augment, hw, hw, rng)
                label = prep.label
                if params.flip:
                    label = flip_map.get(label, label)
                stack = window_stack(prep, t0, cfg.stack_length, modality,
                                     cfg.search_range)
                xs.append(apply_augment(stack, params, hw, modality != "rgb"))
                if with_teacher:
                    tstack = window_stack(prep, t0, cfg.stack_length, "flow",
                                          cfg.search_range)
                    ts.append(apply_augment(tstack, params, hw, True))
                labels.append(label)
            yield distill.TrainBatch(
                np.stack(xs),
                np.array(labels, np.intp),
                np.stack(ts) if with_teacher else None,
            )


def _temporal_net(cfg: ExperimentConfig, hw: int, num_classes: int, seed: int,
                  name: str) -> nn.Network:
    return nn.build_mini_two_stream(hw, 2 * cfg.stack_length, num_classes, "prelu",
                                    seed=seed, dropout_p=cfg.dropout, name=name)


def train_teacher(prepared: dict, manifest: videoio.DatasetManifest,
                  cfg: ExperimentConfig, seed: int = 0):
    """Train the flow-input temporal network with the plain hard-label loss.

    Returns (network, summary) where summary holds final train-window and
    test accuracies.
    """
    train_clips = [prepared[cid] for cid in manifest.clip_ids("train")]
    if not train_clips:
        raise ValueError("no training clips in manifest")
    hw = train_clips[0].hw
    k = len(manifest.class_names)
    net = _temporal_net(cfg, hw, k, seed + 7000, "teacher_flow")
    stream = batch_stream(train_clips, cfg, "flow", seed,
                          flip_map=manifest.flip_classes)
    schedule = nn.LrSchedule.staged(cfg.teacher_steps, cfg.teacher_lr)
    net, metrics = distill.train_student(
        "scratch", None, net, stream, distill.DistillConfig(), schedule,
        seed=seed, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    report = evaluate(net, [prepared[c] for c in manifest.clip_ids("test")],
                      cfg.eval_stride, modality="flow", cfg=cfg)
    summary = {
        "train_acc_window": metrics[-1]["train_acc_window"] if metrics else 0.0,
        "test_acc": report.overall_accuracy,
    }
    return net, summary


def train_spatial(prepared: dict, manifest: videoio.DatasetManifest,
                  cfg: ExperimentConfig, seed: int = 0):
    """Appearance-stream counterpart (single gray frame replicated to 3
    channels); expected near chance on this motion-defined dataset."""
    train_clips = [prepared[cid] for cid in manifest.clip_ids("train")]
    hw = train_clips[0].hw
    k = len(manifest.class_names)
    net = nn.build_mini_two_stream(hw, 3, k, "relu", seed=seed + 9000,
                                   dropout_p=cfg.dropout, name="spatial_rgb")
    stream = batch_stream(train_clips, cfg, "rgb", seed,
                          flip_map=manifest.flip_classes)
    schedule = nn.LrSchedule.staged(cfg.teacher_steps, cfg.scratch_lr)
    net, metrics = distill.train_student(
        "scratch", None, net, stream, distill.DistillConfig(), schedule,
        seed=seed, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return net, metrics


def train_mv_student(strategy: str, teacher: Optional[nn.Network], prepared: dict,
                     manifest: videoio.DatasetManifest, cfg: ExperimentConfig,
                     seed: int):
    """Train the motion-vector student under one transfer strategy."""
    strategy = distill.canonical_strategy(strategy)
    train_clips = [prepared[cid] for cid in manifest.clip_ids("train")]
    hw = train_clips[0].hw
    k = len(manifest.class_names)
    student = _temporal_net(cfg, hw, k, seed, f"student_{strategy}")
    dcfg = distill.DistillConfig(cfg.temperature, cfg.w, strategy)
    stream = batch_stream(train_clips, cfg, "mv", seed,
                          with_teacher=dcfg.uses_soft_targets,
                          flip_map=manifest.flip_classes)
    if strategy == "scratch":
        schedule = nn.LrSchedule.staged(cfg.steps, cfg.lr_for(strategy))
    else:
        # Teacher-supervised runs hold the reduced rate for the whole run:
        # the combined loss scales gradients by roughly (1 + w), and at
        # this run length the students are still converging, so any x0.1
        # drop starves them.
        schedule = nn.LrSchedule(cfg.finetune_lr, (), cfg.steps)
    return distill.train_student(strategy, teacher, student, stream, dcfg, schedule,
                                 seed=seed, momentum=cfg.momentum,
                                 weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------------------
# Fusion and evaluation
# ---------------------------------------------------------------------------


def fuse(spatial_scores: np.ndarray, temporal_scores: np.ndarray,
         weights: FusionWeights = FusionWeights()):
    """Weighted average of per-class scores; returns (fused, argmax class)."""
    s = np.asarray(spatial_scores, dtype=np.float64)
    t = np.asarray(temporal_scores, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"score shapes differ: {s.shape} vs {t.shape}")
    fused = (weights.spatial * s + weights.temporal * t) / (weights.spatial + weights.temporal)
    return fused, int(np.argmax(fused, axis=-1)) if fused.ndim == 1 else np.argmax(fused, axis=-1)


def _clip_windows(prep: PreparedClip, stride: int, stack_length: int) -> list:
    last = prep.transitions - stack_length
    if last < 0:
        return []
    return list(range(0, last + 1, max(1, stride)))


def _stream_probs(net: nn.Network, clips: Sequence[PreparedClip], stride: int,
                  modality: str, cfg: ExperimentConfig, chunk: int = 64):
    """Per-clip class probabilities, averaged over temporal windows."""
    xs, owners = [], []
    usable = []
    for ci, prep in enumerate(clips):
        t0s = _clip_windows(prep, stride, cfg.stack_length)
        if not t0s:
            continue
        usable.append(ci)
        for t0 in t0s:
            xs.append(augment_test(window_stack(prep, t0, cfg.stack_length, modality,
                                                cfg.search_range)))
            owners.append(ci)
    probs = {ci: [] for ci in usable}
    for start in range(0, len(xs), chunk):
        batch = np.stack(xs[start : start + chunk])
        logits, _ = nn.forward(net, batch, "eval")
        p = nn.softmax(logits)
        for row, ci in zip(p, owners[start : start + chunk]):
            probs[ci].append(row)
    return {ci: np.mean(rows, axis=0) for ci, rows in probs.items()}


def evaluate(model, clips: Sequence[PreparedClip], stride: int = 4,
             modality: str = "mv", cfg: Optional[ExperimentConfig] = None,
             weights: FusionWeights = FusionWeights()) -> EvalReport:
    """Score clips and tabulate a confusion matrix.

    `model` is either a single Network (fed `modality` windows) or a
    (spatial_net, temporal_net) pair whose per-stream window-averaged
    probabilities are fused with `weights`.
    """
    cfg = cfg or ExperimentConfig()
    clips = list(clips)
    if isinstance(model, nn.Network):
        per_clip = _stream_probs(model, clips, stride, modality, cfg)
    else:
        spatial_net, temporal_net = model
        sp = _stream_probs(spatial_net, clips, stride, "rgb", cfg)
        tp = _stream_probs(temporal_net, clips, stride, modality, cfg)
        per_clip = {ci: fuse(sp[ci], tp[ci], weights)[0] for ci in sp if ci in tp}
    k = model.num_classes if isinstance(model, nn.Network) else model[1].num_classes
    confusion = np.zeros((k, k), np.int64)
    for ci, prob in per_clip.items():
        confusion[clips[ci].label, int(np.argmax(prob))] += 1
    return EvalReport(confusion, len(per_clip), len(clips) - len(per_clip))


# ---------------------------------------------------------------------------
# The experiment matrix
# ---------------------------------------------------------------------------

ROW_LABELS = {
    "scratch": "MV-scratch",
    "supervision_transfer": "EMV-ST",
    "teacher_init": "EMV-TI",
    "combined": "EMV-ST+TI",
    "teacher": "OF-teacher",
}
ROW_ORDER = ("scratch", "supervision_transfer", "teacher_init", "combined", "teacher")


@dataclass
class ExperimentReport:
    rows: dict = field(default_factory=dict)  # strategy -> list of (seed, accuracy)
    config: Optional[ExperimentConfig] = None

    def add(self, strategy: str, seed: int, acc: float) -> None:
        self.rows.setdefault(strategy, []).append((seed, acc))

    def mean(self, strategy: str) -> float:
        vals = [a for _, a in self.rows.get(strategy, [])]
        return float(np.mean(vals)) if vals else math.nan

    def sd(self, strategy: str) -> float:
        vals = [a for _, a in self.rows.get(strategy, [])]
        return float(np.std(vals)) if len(vals) > 1 else 0.0

    def table(self) -> str:
        lines = [f"{'method':<12} {'mean%':>7} {'sd':>5}  runs"]
        for key in ROW_ORDER:
            if key not in self.rows:
                continue
            accs = " ".join(f"{a*100:5.1f}" for _, a in sorted(self.rows[key]))
            lines.append(
                f"{ROW_LABELS[key]:<12} {self.mean(key)*100:7.1f} "
                f"{self.sd(key)*100:5.1f}  [{accs}]"
            )
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["strategy", "seed", "accuracy"])
            for key in ROW_ORDER:
                for seed, acc in sorted(self.rows.get(key, [])):
                    writer.writerow([ROW_LABELS[key], seed, f"{acc:.6f}"])


def run_experiment(manifest: videoio.DatasetManifest, clips: Sequence[videoio.Clip],
                   strategies: Sequence[str], seeds: Sequence[int],
                   cfg: ExperimentConfig = ExperimentConfig(),
                   prepared: Optional[dict] = None,
                   teacher: Optional[nn.Network] = None,
                   flow_cache=None, partial_csv=None):
    """Strategy x seed training matrix plus the flow teacher.

    One teacher (trained at the first seed) supplies initialization and
    soft targets for every student run.  On a failed sub-run the rows
    gathered so far are flushed to `partial_csv` before the error
    propagates.  Returns (report, teacher, prepared).
    """
    strategies = [distill.canonical_strategy(s) for s in strategies]
    if prepared is None:
        need_flow = teacher is None or any(
            distill.DistillConfig(strategy=s).uses_soft_targets for s in strategies
        )
        prepared = prepare_dataset(manifest, clips, cfg.gop, with_flow=need_flow,
                                   flow_cache=flow_cache)
    report = ExperimentReport(config=cfg)
    test_clips = [prepared[c] for c in manifest.clip_ids("test")]
    try:
        if teacher is None:
            teacher, _ = train_teacher(prepared, manifest, cfg, seed=seeds[0])
        t_eval = evaluate(teacher, test_clips, cfg.eval_stride, "flow", cfg)
        report.add("teacher", seeds[0], t_eval.overall_accuracy)
        for strategy in strategies:
            for seed in seeds:
                student, _ = train_mv_student(strategy, teacher, prepared, manifest,
                                              cfg, seed)
                ev = evaluate(student, test_clips, cfg.eval_stride, "mv", cfg)
                report.add(strategy, seed, ev.overall_accuracy)
    except Exception:
        if partial_csv is not None:
            report.to_csv(partial_csv)
        raise
    return report, teacher, prepared


def run_temperature_sweep(manifest: videoio.DatasetManifest, clips,
                          temperatures: Sequence[float] = (1.0, 2.0, 3.0),
                          seed: int = 1, cfg: ExperimentConfig = ExperimentConfig(),
                          prepared: Optional[dict] = None,
                          teacher: Optional[nn.Network] = None,
                          flow_cache=None) -> dict:
    """Temperature protocol: w follows Temp^2; returns {Temp: accuracy}."""
    if prepared is None:
        prepared = prepare_dataset(manifest, clips, cfg.gop, flow_cache=flow_cache)
    if teacher is None:
        teacher, _ = train_teacher(prepared, manifest, cfg, seed=seed)
    test_clips = [prepared[c] for c in manifest.clip_ids("test")]
    out = {}
    for temp in temperatures:
        run_cfg = replace(cfg, temperature=float(temp), w=None)
        student, _ = train_mv_student("combined", teacher, prepared, manifest,
                                      run_cfg, seed)
        ev = evaluate(student, test_clips, cfg.eval_stride, "mv", run_cfg)
        out[float(temp)] = ev.overall_accuracy
    return out
