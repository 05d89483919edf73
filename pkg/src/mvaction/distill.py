"""Teacher-student knowledge transfer for the motion stream.

Three strategies move knowledge from a flow-trained teacher into a
motion-vector student: copying the teacher's parameters as the student's
initialization, supervising the student with the teacher's
temperature-softened class distribution, and both together.  The teacher
is frozen throughout; only the student's parameters receive updates.

The combined objective is  L = L_tsl + w * L_gt  where L_tsl is the
cross-entropy between softened teacher and student distributions and
L_gt the usual hard-label cross-entropy on the student's unsoftened
output.  w defaults to temperature squared; no additional gradient
rescaling is applied on top of that weighting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import nn

STRATEGIES = ("scratch", "teacher_init", "supervision_transfer", "combined")
_STRATEGY_ALIASES = {
    "scratch": "scratch",
    "ti": "teacher_init",
    "teacher_init": "teacher_init",
    "st": "supervision_transfer",
    "supervision_transfer": "supervision_transfer",
    "ti+st": "combined",
    "st+ti": "combined",
    "combined": "combined",
}

PROB_FLOOR = 1e-12


def canonical_strategy(name: str) -> str:
    try:
        return _STRATEGY_ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(
            f"unknown strategy {name!r}; expected one of scratch, ti, st, ti+st"
        ) from None


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    w: Optional[float] = None  # None means temperature**2
    strategy: str = "combined"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.w is not None and self.w < 0:
            raise ValueError(f"w must be non-negative, got {self.w}")
        object.__setattr__(self, "strategy", canonical_strategy(self.strategy))

    @property
    def w_used(self) -> float:
        return self.temperature ** 2 if self.w is None else self.w

    @property
    def uses_teacher(self) -> bool:
        return self.strategy != "scratch"

    @property
    def uses_soft_targets(self) -> bool:
        return self.strategy in ("supervision_transfer", "combined")

    @property
    def uses_teacher_init(self) -> bool:
        return self.strategy in ("teacher_init", "combined")


@dataclass(frozen=True)
class SoftTargets:
    """Softened teacher/student distributions at a shared temperature."""

    p_teacher: np.ndarray
    p_student: np.ndarray

    def __post_init__(self):
        pt = np.asarray(self.p_teacher)
        ps = np.asarray(self.p_student)
        if pt.shape != ps.shape:
            raise ValueError(f"dimension mismatch: {pt.shape} vs {ps.shape}")
        for name, p in (("teacher", pt), ("student", ps)):
            if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-9):
                raise ValueError(f"{name} probabilities do not sum to 1")


@dataclass(frozen=True)
class LossBreakdown:
    l_tsl: float
    l_gt: float
    total: float
    w_used: float


def soften(logits: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(logits / T); T=1 is the plain softmax."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return nn.softmax(np.asarray(logits) / temperature)


def loss_tsl(p_teacher: np.ndarray, p_student: np.ndarray) -> float:
    """Cross-entropy -sum(P_T * log P_S); mean over a leading batch axis."""
    pt = np.asarray(p_teacher, dtype=np.float64)
    ps = np.asarray(p_student, dtype=np.float64)
    if pt.shape != ps.shape:
        raise ValueError(f"dimension mismatch: {pt.shape} vs {ps.shape}")
    ce = -(pt * np.log(np.clip(ps, PROB_FLOOR, None))).sum(axis=-1)
    return float(ce.mean())


def loss_gt(student_probs: np.ndarray, labels) -> float:
    """Hard-label cross-entropy -log p[Q]; mean over a leading batch axis."""
    p = np.asarray(student_probs, dtype=np.float64)
    q = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    k = p.shape[-1]
    if np.any(q < 0) or np.any(q >= k):
        raise ValueError(f"label out of range [0,{k})")
    p2 = p.reshape(-1, k)
    picked = p2[np.arange(p2.shape[0]), q]
    return float(-np.log(np.clip(picked, PROB_FLOOR, None)).mean())


def loss_combined(teacher_logits, student_logits, labels, cfg: DistillConfig) -> LossBreakdown:
    """Soft teacher supervision plus w-weighted hard-label loss.

    Accepts single logit vectors or batches; batch losses are means.  The
    teacher side is treated as a constant (no gradient ever flows to it).
    """
    tl = np.asarray(teacher_logits, dtype=np.float64)
    sl = np.asarray(student_logits, dtype=np.float64)
    if tl.shape != sl.shape:
        raise ValueError(f"dimension mismatch: {tl.shape} vs {sl.shape}")
    temp = cfg.temperature
    l_t = loss_tsl(soften(tl, temp), soften(sl, temp))
    l_g = loss_gt(nn.softmax(sl), labels)
    w = cfg.w_used
    return LossBreakdown(l_t, l_g, l_t + w * l_g, w)


def loss_combined_grad(teacher_logits, student_logits, labels, cfg: DistillConfig) -> np.ndarray:
    """d(total)/d(student_logits), matching loss_combined's batch-mean scaling.

    The softened term contributes (P_S - P_T)/T per sample; the hard term
    contributes softmax(student) minus the one-hot label, scaled by w.
    """
    tl = np.asarray(teacher_logits, dtype=np.float64)
    sl = np.asarray(student_logits, dtype=np.float64)
    squeeze = sl.ndim == 1
    tl2 = np.atleast_2d(tl)
    sl2 = np.atleast_2d(sl)
    q = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    n, k = sl2.shape
    temp = cfg.temperature
    g = (soften(sl2, temp) - soften(tl2, temp)) / temp
    hard = nn.softmax(sl2)
    hard[np.arange(n), q] -= 1.0
    g = (g + cfg.w_used * hard) / n
    return g[0] if squeeze else g


def gt_only_grad(student_logits, labels) -> np.ndarray:
    """d(loss_gt)/d(student_logits) for teacher-free training."""
    sl = np.atleast_2d(np.asarray(student_logits))
    q = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    n = sl.shape[0]
    g = nn.softmax(sl)
    g[np.arange(n), q] -= 1.0
    return g / n


def teacher_init(teacher: nn.Network, student: nn.Network) -> nn.Network:
    """Copy the teacher's parameters into the student, bitwise.

    Architectures must match layer-for-layer; only the first convolution
    may differ in input-channel count, in which case the overlapping
    channels are copied and the student's surplus channels keep their own
    fresh initialization.  Mutates and returns the student.
    """
    if len(teacher.layers) != len(student.layers):
        raise ValueError(
            f"layer count mismatch: teacher {len(teacher.layers)}, "
            f"student {len(student.layers)}"
        )
    for i, (tl, sl) in enumerate(zip(teacher.layers, student.layers)):
        if type(tl) is not type(sl):
            raise ValueError(f"layer {i}: kind mismatch ({tl.kind} vs {sl.kind})")
        if tl.descriptor() == sl.descriptor():
            for tp, sp in zip(tl.params(), sl.params()):
                sp.value = tp.value.copy()
            continue
        first_conv = isinstance(tl, nn.Conv2d) and i == next(
            j for j, l in enumerate(student.layers) if isinstance(l, nn.Conv2d)
        )
        same_but_channels = (
            isinstance(tl, nn.Conv2d)
            and tl.descriptor()[1:] == sl.descriptor()[1:]
        )
        if not (first_conv and same_but_channels):
            raise ValueError(
                f"layer {i} ({sl.name}): structural mismatch "
                f"{tl.descriptor()} vs {sl.descriptor()}"
            )
        c = min(tl.in_ch, sl.in_ch)  # weights are (KH, KW, C_in, C_out)
        sl.weight.value[:, :, :c, :] = tl.weight.value[:, :, :c, :]
        sl.bias.value = tl.bias.value.copy()
    student.bump()
    return student


@dataclass
class TrainBatch:
    """One optimization step's worth of data.

    `student_x` feeds the student; `teacher_x` feeds the frozen teacher
    (same clips seen through its own modality) and may be None for
    strategies that never query the teacher.
    """

    student_x: np.ndarray
    labels: np.ndarray
    teacher_x: Optional[np.ndarray] = None


def clip_grad_norm(grads: list, max_norm: float) -> float:
    """Scale the gradient list in place so its global L2 norm is at most
    max_norm; returns the pre-clip norm.  Deterministic, shape-preserving."""
    total = 0.0
    for g in grads:
        total += float((g.astype(np.float64) ** 2).sum())
    norm = total ** 0.5
    if norm > max_norm > 0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def train_student(strategy: str, teacher: Optional[nn.Network], student: nn.Network,
                  batches: Iterable[TrainBatch], cfg: DistillConfig,
                  schedule: nn.LrSchedule, seed: int = 0,
                  momentum: float = 0.9, weight_decay: float = 5e-4,
                  acc_window: int = 50, clip_norm: float = 10.0):
    """Run the student's optimization loop under the given transfer strategy.

    Returns (student, metrics) where metrics is a list of per-step dicts
    with keys step, lr, l_tsl, l_gt, total, train_acc_window.  The teacher
    is only ever run in eval mode and is never updated.  Gradients are
    norm-clipped at clip_norm (0 disables); without a cap, a no-batchnorm
    net at the high initial rate can run away through mutually growing
    weights and PReLU slopes.
    """
    cfg = DistillConfig(cfg.temperature, cfg.w, strategy)
    if cfg.uses_teacher and teacher is None:
        raise ValueError(f"strategy {cfg.strategy} requires a teacher network")
    if cfg.uses_teacher_init:
        teacher_init(teacher, student)

    state = nn.OptimState.for_net(student, momentum, weight_decay)
    metrics: list[dict] = []
    recent_hits: list[float] = []
    for step, batch in enumerate(batches):
        if step >= schedule.stop_step:
            break
        logits, cache = nn.forward(student, batch.student_x, "train",
                                   rng_seed=seed * 1000003 + step)
        if cfg.uses_soft_targets:
            if batch.teacher_x is None:
                raise ValueError("batch lacks teacher inputs for soft supervision")
            t_logits, _ = nn.forward(teacher, batch.teacher_x, "eval")
            bd = loss_combined(t_logits, logits, batch.labels, cfg)
            lg = loss_combined_grad(t_logits, logits, batch.labels, cfg)
        else:
            l_g = loss_gt(nn.softmax(logits), batch.labels)
            bd = LossBreakdown(0.0, l_g, l_g, 0.0)
            lg = gt_only_grad(logits, batch.labels)
        grads = nn.backward(student, cache, lg.astype(logits.dtype))
        if clip_norm:
            clip_grad_norm(grads, clip_norm)
        nn.sgd_step(student, grads, state, schedule, step)

        hits = (np.argmax(logits, axis=-1) == batch.labels).mean()
        recent_hits.append(float(hits))
        if len(recent_hits) > acc_window:
            recent_hits.pop(0)
        metrics.append({
            "step": step,
            "lr": schedule.lr_at(step),
            "l_tsl": bd.l_tsl,
            "l_gt": bd.l_gt,
            "total": bd.total,
            "train_acc_window": sum(recent_hits) / len(recent_hits),
        })
    return student, metrics


def metrics_to_csv(metrics: list, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["step", "lr", "l_tsl", "l_gt", "total", "train_acc_window"]
        )
        writer.writeheader()
        for row in metrics:
            writer.writerow(row)
