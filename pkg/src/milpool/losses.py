"""Training losses for both stages, with gradients w.r.t. model outputs.

Every loss accepts one clip (frame arrays ``(T, C)``, clip arrays ``(C,)``)
or a batch (``(B, T, C)`` / ``(B, C)``). Per-clip terms are averaged over
their own frames and classes; a batch value is the sum of per-clip values
divided by ``B``. Returned gradients have the shapes of the inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .frame_model import PredictionBundle, trainable_keys

PROB_EPS = 1e-7


class Availability(str, Enum):
    STRONG = "strong"
    WEAK = "weak"
    UNLABELED = "unlabeled"


@dataclass
class LossWeights:
    lam: float = 0.03
    mu_max: float = 1.0
    ramp_epochs: int = 15
    alpha: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.mu_max < 0:
            raise ValueError("lambda and mu_max must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.ramp_epochs < 0:
            raise ValueError("ramp_epochs must be non-negative")


@dataclass
class FrameTargets:
    """Labels of one clip; which fields exist depends on ``availability``."""

    availability: Availability
    t_frame: np.ndarray | None = None
    t_clip: np.ndarray | None = None

    def __post_init__(self):
        self.availability = Availability(self.availability)
        if self.availability is Availability.STRONG:
            if self.t_frame is None:
                raise ValueError("strong targets need frame labels")
            self.t_frame = np.asarray(self.t_frame, dtype=np.float64)
            derived = self.t_frame.max(axis=0)
            if self.t_clip is None:
                self.t_clip = derived
            elif not np.array_equal(np.asarray(self.t_clip, dtype=np.float64), derived):
                raise ValueError("strong clip labels must equal the frame-label maximum")
        elif self.availability is Availability.WEAK:
            if self.t_clip is None or self.t_frame is not None:
                raise ValueError("weak targets carry clip labels only")
        elif self.t_clip is not None or self.t_frame is not None:
            raise ValueError("unlabeled targets carry no labels")
        if self.t_clip is not None:
            self.t_clip = np.asarray(self.t_clip, dtype=np.float64)

    @classmethod
    def strong(cls, t_frame):
        return cls(Availability.STRONG, t_frame=t_frame)

    @classmethod
    def weak(cls, t_clip):
        return cls(Availability.WEAK, t_clip=t_clip)

    @classmethod
    def unlabeled(cls):
        return cls(Availability.UNLABELED)


@dataclass
class TargetBatch:
    t_frame: np.ndarray  # (B, T, C); zeros where unavailable
    t_clip: np.ndarray  # (B, C)
    has_frame: np.ndarray  # (B,) bool
    has_clip: np.ndarray  # (B,) bool

    @classmethod
    def stack(cls, targets, num_frames: int, num_classes: int) -> "TargetBatch":
        B = len(targets)
        tf = np.zeros((B, num_frames, num_classes))
        tc = np.zeros((B, num_classes))
        hf = np.zeros(B, dtype=bool)
        hc = np.zeros(B, dtype=bool)
        for i, t in enumerate(targets):
            if t.t_frame is not None:
                tf[i] = t.t_frame
                hf[i] = True
            if t.t_clip is not None:
                tc[i] = t.t_clip
                hc[i] = True
        return cls(tf, tc, hf, hc)


@dataclass
class LossTerm:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    parts: dict[str, float] = field(default_factory=dict)


def bce(pred, target):
    """Elementwise binary cross-entropy with soft targets."""
    p = np.clip(np.asarray(pred, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(target, dtype=np.float64)
    out = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def bce_grad(pred, target):
    """d bce / d pred; zero where the clamp is active."""
    pred = np.asarray(pred, dtype=np.float64)
    p = np.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    g = (p - target) / (p * (1.0 - p))
    return np.where((pred >= PROB_EPS) & (pred <= 1.0 - PROB_EPS), g, 0.0)


def hinted_output(y_frame, confidence, t_frame):
    """Blend of prediction and label: ``(1 - c) * t + c * y``."""
    y, c, t = (np.asarray(a, dtype=np.float64) for a in (y_frame, confidence, t_frame))
    if not (y.shape == c.shape == t.shape):
        raise ValueError(f"shape mismatch {y.shape}, {c.shape}, {t.shape}")
    return (1.0 - c) * t + c * y


def _batch(arr, ndim):
    arr = np.asarray(arr, dtype=np.float64)
    return (arr[None], True) if arr.ndim == ndim - 1 else (arr, False)


def _unbatch(arr, single):
    return arr[0] if single else arr


def _as_target_batch(targets, shape) -> tuple[TargetBatch, FrameTargets | None]:
    if isinstance(targets, TargetBatch):
        return targets, None
    if isinstance(targets, FrameTargets):
        return TargetBatch.stack([targets], shape[-2], shape[-1]), targets
    return TargetBatch.stack(list(targets), shape[-2], shape[-1]), None


def classification_loss(bundle: PredictionBundle, targets, use_hint: bool = False) -> LossTerm:
    """Frame BCE (strong clips, optionally on hinted outputs) plus clip BCE (strong and weak)."""
    y, single = _batch(bundle.frame_probs, 3)
    yc, _ = _batch(bundle.clip_probs, 2)
    c, _ = _batch(bundle.confidence, 3)
    tb, lone = _as_target_batch(targets, y.shape)
    if use_hint and lone is not None and lone.availability is not Availability.STRONG:
        raise ValueError(f"hinting needs frame labels; got a {lone.availability.value} clip")
    B, T, C = y.shape
    hf = tb.has_frame[:, None, None]
    hc = tb.has_clip[:, None]
    y_used = hinted_output(y, c, tb.t_frame) if use_hint else y
    frame_l = np.where(hf, bce(y_used, tb.t_frame), 0.0)
    clip_l = np.where(hc, bce(yc, tb.t_clip), 0.0)
    value = (frame_l.sum() / (T * C) + clip_l.sum() / C) / B
    g_used = np.where(hf, bce_grad(y_used, tb.t_frame), 0.0) / (T * C * B)
    grads = {}
    if use_hint:
        grads["frame_probs"] = _unbatch(c * g_used, single)
        grads["confidence"] = _unbatch((y - tb.t_frame) * g_used, single)
    else:
        grads["frame_probs"] = _unbatch(g_used, single)
    grads["clip_probs"] = _unbatch(np.where(hc, bce_grad(yc, tb.t_clip), 0.0) / (C * B), single)
    parts = {"frame": float(frame_l.sum() / (T * C) / B), "clip": float(clip_l.sum() / C / B)}
    return LossTerm(float(value), grads, parts)


def consistency_loss(student: PredictionBundle, teacher: PredictionBundle) -> LossTerm:
    """MSE between student and teacher, frame level plus clip level; teacher held constant."""
    ys, single = _batch(student.frame_probs, 3)
    yt, _ = _batch(teacher.frame_probs, 3)
    cs, _ = _batch(student.clip_probs, 2)
    ct, _ = _batch(teacher.clip_probs, 2)
    if ys.shape != yt.shape or cs.shape != ct.shape:
        raise ValueError("student and teacher outputs differ in shape")
    B, T, C = ys.shape
    df = ys - yt
    dc = cs - ct
    value = ((df * df).sum() / (T * C) + (dc * dc).sum() / C) / B
    return LossTerm(
        float(value),
        {
            "frame_probs": _unbatch(2.0 * df / (T * C * B), single),
            "clip_probs": _unbatch(2.0 * dc / (C * B), single),
        },
    )


def confidence_penalty(confidence, mask=None) -> LossTerm:
    """Mean of ``-log(c)``; ``mask`` (B,) selects the clips that pay it."""
    c, single = _batch(confidence, 3)
    B, T, C = c.shape
    cc = np.clip(c, PROB_EPS, 1.0)
    sel = np.ones(B, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    sel3 = sel[:, None, None]
    value = np.where(sel3, -np.log(cc), 0.0).sum() / (T * C * B)
    grad = np.where(sel3 & (c >= PROB_EPS), -1.0 / (cc * T * C * B), 0.0)
    return LossTerm(float(value), {"confidence": _unbatch(grad, single)})


def mu_schedule(epoch: float, weights: LossWeights) -> float:
    """Consistency weight: ``mu_max * exp(-5 (1 - min(epoch / ramp, 1))**2)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if weights.ramp_epochs == 0:
        return float(weights.mu_max)
    frac = min(epoch / weights.ramp_epochs, 1.0)
    return float(weights.mu_max * math.exp(-5.0 * (1.0 - frac) ** 2))


@dataclass
class Stage1Loss:
    total: float
    components: dict[str, float]
    grads: dict[str, np.ndarray]
    phase: str


def _add(into: dict, grads: dict, scale: float = 1.0):
    for k, g in grads.items():
        into[k] = into[k] + scale * g if k in into else scale * g


def stage1_loss(student, teacher, targets, epoch, weights: LossWeights, phase: str) -> Stage1Loss:
    """Multi-task loss ``L_class + mu * L_con (+ lambda * L_conf)``.

    ``classification`` phase: no hint, no confidence penalty, confidence head
    frozen. ``confidence`` phase: hinted frame outputs on strong clips plus the
    confidence penalty on those clips; only the confidence head trains.
    """
    if phase not in ("classification", "confidence"):
        raise ValueError(f"unknown phase {phase!r}")
    hint = phase == "confidence"
    tb, _ = _as_target_batch(targets, np.shape(student.frame_probs))
    cls = classification_loss(student, targets, use_hint=hint)
    con = consistency_loss(student, teacher)
    mu = mu_schedule(epoch, weights)
    grads: dict[str, np.ndarray] = {}
    _add(grads, cls.grads)
    _add(grads, con.grads, mu)
    components = {
        "class_frame": cls.parts["frame"],
        "class_clip": cls.parts["clip"],
        "consistency": con.value,
        "mu": mu,
        "confidence": 0.0,
    }
    total = cls.value + mu * con.value
    if hint:
        pen = confidence_penalty(student.confidence, tb.has_frame)
        _add(grads, pen.grads, weights.lam)
        components["confidence"] = pen.value
        total += weights.lam * pen.value
    else:
        grads.pop("confidence", None)
    return Stage1Loss(float(total), components, grads, phase)


def freeze(param_grads: dict[str, np.ndarray], params, phase: str) -> dict[str, np.ndarray]:
    """Zero the gradient of every parameter that does not train in ``phase``."""
    keep = set(trainable_keys(params, phase))
    return {k: (g if k in keep else np.zeros_like(g)) for k, g in param_grads.items()}


def interpolate_confidence(confidence, alpha: float):
    """``alpha * c + (1 - alpha)``: lifts every weight to at least ``1 - alpha``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * np.asarray(confidence, dtype=np.float64) + (1.0 - alpha)


def weighted_frame_loss(frame_probs, pseudo_targets, weights) -> LossTerm:
    """Per-clip ``sum(w * bce) / sum(w)``, averaged over the batch.

    Clips whose weights are all zero contribute nothing; a batch in which
    every clip has zero weight is an error.
    """
    y, single = _batch(frame_probs, 3)
    t, _ = _batch(pseudo_targets, 3)
    w, _ = _batch(weights, 3)
    if not (y.shape == t.shape == w.shape):
        raise ValueError(f"shape mismatch {y.shape}, {t.shape}, {w.shape}")
    B = y.shape[0]
    wsum = w.sum(axis=(1, 2))
    if np.any(w < 0):
        raise ValueError("frame weights must be non-negative")
    live = wsum > 0
    if not live.any():
        raise ValueError("all frame weights are zero")
    denom = np.where(live, wsum, 1.0)[:, None, None]
    value = ((w * bce(y, t)).sum(axis=(1, 2)) / denom[:, 0, 0])[live].sum() / B
    grad = w * bce_grad(y, t) / denom / B
    return LossTerm(float(value), {"frame_probs": _unbatch(grad, single)})


def mean_frame_loss(frame_probs, pseudo_targets) -> LossTerm:
    """Unweighted per-clip mean BCE, averaged over the batch."""
    y, single = _batch(frame_probs, 3)
    t, _ = _batch(pseudo_targets, 3)
    B, T, C = y.shape
    # same operation order as weighted_frame_loss with unit weights, so that
    # alpha = 0 reproduces this loss bit for bit
    value = (bce(y, t).sum(axis=(1, 2)) / float(T * C)).sum() / B
    return LossTerm(float(value), {"frame_probs": _unbatch(bce_grad(y, t) / float(T * C) / B, single)})
