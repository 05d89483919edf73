"""Wall-clock throughput for each pipeline stage.

Frame accounting: a temporal-CNN forward that consumes a stacked window of
L transitions is charged L frames, and the end-to-end figure divides by
the same frame total, so the composition bound (total fps no faster than
any stage) holds by construction.  All workloads are materialized in
memory before timing; nothing inside a timed region touches the
filesystem.  The decode stage is additionally checked against the block
matcher's evaluation counter: replaying stored vectors must cost zero SAD
evaluations.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import motion, nn, pipeline, videoio

STAGES = ("mv_decode", "mv_encode", "flow", "cnn_forward", "total")
REAL_TIME_FPS = 25.0


@dataclass
class StageTiming:
    stage: str
    frames: int
    seconds: float  # median over measured iterations
    seconds_min: float = 0.0
    seconds_max: float = 0.0
    iters: int = 1
    warmup: int = 0
    noisy: bool = False

    def __post_init__(self):
        if self.seconds <= 0:
            raise ValueError(f"{self.stage}: non-positive wall time")

    @property
    def fps(self) -> float:
        return self.frames / self.seconds


@dataclass
class BenchReport:
    stages: list
    total_fps: float
    hardware_note: str = ""
    warmup: int = 0
    iters: int = 0
    sad_evals_decode: int = 0

    def stage(self, name: str) -> StageTiming:
        for st in self.stages:
            if st.stage == name:
                return st
        raise KeyError(name)

    def table(self) -> str:
        lines = [f"{'stage':<12} {'frames':>7} {'ms':>9} {'fps':>9}  spread"]
        for st in self.stages:
            spread = f"[{st.seconds_min*1000:.1f}..{st.seconds_max*1000:.1f} ms]"
            noisy = "  (noisy)" if st.noisy else ""
            lines.append(
                f"{st.stage:<12} {st.frames:>7} {st.seconds*1000:>9.1f} "
                f"{st.fps:>9.1f}  {spread}{noisy}"
            )
        verdict = "PASS" if self.total_fps > REAL_TIME_FPS else "FAIL"
        lines.append(f"real-time threshold {REAL_TIME_FPS:.0f} fps: {verdict} "
                     f"(total {self.total_fps:.1f} fps)")
        if self.hardware_note:
            lines.append(f"hardware: {self.hardware_note}")
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "frames", "seconds_median", "seconds_min",
                             "seconds_max", "fps", "iters", "warmup"])
            for st in self.stages:
                writer.writerow([st.stage, st.frames, f"{st.seconds:.6f}",
                                 f"{st.seconds_min:.6f}", f"{st.seconds_max:.6f}",
                                 f"{st.fps:.2f}", st.iters, st.warmup])


def _time_callable(fn: Callable[[], object], warmup: int, iters: int):
    if iters < 1:
        raise ValueError("iters must be at least 1")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples), min(samples), max(samples)


@dataclass
class Workload:
    """In-memory inputs for the benchmark stages, derived from real clips."""

    clips: list                      # trimmed Clip objects
    compressed: list                 # CompressedClip per clip
    prepared: list                   # PreparedClip per clip
    cfg: pipeline.ExperimentConfig
    net: Optional[nn.Network] = None
    spatial: Optional[nn.Network] = None

    @property
    def stack_length(self) -> int:
        return self.cfg.stack_length

    @property
    def windows_per_clip(self) -> int:
        t = len(self.clips[0].frames) - 1
        return t // self.stack_length

    @property
    def frame_total(self) -> int:
        # frames = windows x stack depth, identically for every stage
        return len(self.clips) * self.windows_per_clip * self.stack_length


def build_workload(clips: Sequence[videoio.Clip], cfg: pipeline.ExperimentConfig,
                   net: Optional[nn.Network] = None,
                   spatial: Optional[nn.Network] = None) -> Workload:
    """Trim clips to whole stacked windows and pre-encode them."""
    if not clips:
        raise ValueError("empty workload")
    trimmed = []
    for clip in clips:
        windows = (len(clip.frames) - 1) // cfg.stack_length
        if windows < 1:
            raise ValueError(f"{clip.clip_id}: too short for one stacked window")
        keep = windows * cfg.stack_length + 1
        trimmed.append(videoio.Clip(clip.frames[:keep], clip.label,
                                    clip.fps_nominal, clip.clip_id))
    compressed = [videoio.encode(c, cfg.gop) for c in trimmed]
    prepared = [pipeline.prepare_clip(c, "bench", cfg.gop, with_flow=False)
                for c in trimmed]
    return Workload(trimmed, compressed, prepared, cfg, net, spatial)


def _decode_all(work: Workload):
    for cc in work.compressed:
        motion.fill_iframe_gaps(videoio.decode_motion_vectors(cc))


def _encode_all(work: Workload):
    for clip in work.clips:
        videoio.encode(clip, work.cfg.gop)


def _flow_all(work: Workload):
    for clip in work.clips:
        frames = clip.frames
        for t in range(len(frames) - 1):
            motion.estimate_flow(frames[t].luma, frames[t + 1].luma)


def _stack_batches(work: Workload):
    cfg = work.cfg
    batches = []
    xs = []
    for prep in work.prepared:
        for wi in range(work.windows_per_clip):
            xs.append(pipeline.window_stack(prep, wi * cfg.stack_length,
                                            cfg.stack_length, "mv",
                                            cfg.search_range))
            if len(xs) == 16:
                batches.append(np.stack(xs))
                xs = []
    if xs:
        batches.append(np.stack(xs))
    return batches


def _forward_all(net: nn.Network, batches):
    for batch in batches:
        logits, _ = nn.forward(net, batch, "eval")
        nn.softmax(logits)


def _total_once(work: Workload):
    """Container bytes in, fused per-clip predictions out."""
    cfg = work.cfg
    net = work.net
    for cc, prep in zip(work.compressed, work.prepared):
        fields = motion.fill_iframe_gaps(videoio.decode_motion_vectors(cc))
        hw = prep.hw
        maps = [motion.rasterize(f, hw, hw) for f in fields[1:]]
        probs = []
        for wi in range(work.windows_per_clip):
            stack = motion.stack_inputs(maps, wi * cfg.stack_length,
                                        cfg.stack_length) / cfg.search_range
            logits, _ = nn.forward(net, stack[None].astype(np.float32), "eval")
            probs.append(nn.softmax(logits)[0])
        temporal = np.mean(probs, axis=0)
        if work.spatial is not None:
            frame = prep.frames[len(prep.frames) // 2].astype(np.float32) / 255.0 - 0.5
            logits, _ = nn.forward(work.spatial, np.repeat(frame[None], 3, 0)[None], "eval")
            pipeline.fuse(nn.softmax(logits)[0], temporal)
        else:
            np.argmax(temporal)


def bench_stage(stage: str, workload: Workload, warmup: int = 2,
                iters: int = 5) -> StageTiming:
    """Median-of-iters wall time for one stage over the whole workload."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if not workload.clips:
        raise ValueError("empty workload")
    if stage in ("cnn_forward", "total") and workload.net is None:
        raise ValueError(f"stage {stage} needs a network in the workload")

    if stage == "mv_decode":
        fn = lambda: _decode_all(workload)
    elif stage == "mv_encode":
        fn = lambda: _encode_all(workload)
    elif stage == "flow":
        fn = lambda: _flow_all(workload)
    elif stage == "cnn_forward":
        batches = _stack_batches(workload)  # input prep outside the timed region
        fn = lambda: _forward_all(workload.net, batches)
    else:
        fn = lambda: _total_once(workload)

    med, lo, hi = _time_callable(fn, warmup, iters)
    return StageTiming(stage, workload.frame_total, med, lo, hi, iters, warmup,
                       noisy=(iters < 3 or warmup == 0))


def bench_pipeline(clips: Sequence[videoio.Clip], net: nn.Network,
                   cfg: pipeline.ExperimentConfig = None,
                   spatial: Optional[nn.Network] = None,
                   warmup: int = 2, iters: int = 5,
                   hardware_note: str = "") -> BenchReport:
    """Time decode->rasterize->stack->forward->fuse end to end plus the
    component stages, and check the decode stage never runs a block search."""
    cfg = cfg or pipeline.ExperimentConfig()
    work = build_workload(clips, cfg, net, spatial)

    before = motion.sad_eval_count()
    _decode_all(work)
    sad_in_decode = motion.sad_eval_count() - before

    stages = [
        bench_stage("mv_decode", work, warmup, iters),
        bench_stage("cnn_forward", work, warmup, iters),
        bench_stage("total", work, warmup, iters),
    ]
    total_fps = stages[-1].fps
    return BenchReport(stages, total_fps, hardware_note, warmup, iters,
                       sad_evals_decode=sad_in_decode)
