"""Two-stage training: mean-teacher multi-task model, then confidence-weighted retraining.

Stage one trains the student on strong, weak and unlabeled clips with
``L_class + mu * L_con`` (phase A), then freezes everything except the
confidence head and trains it for a few epochs with hinted outputs and the
``-log(c)`` penalty (phase B). The teacher is an EMA of the student.

Stage two turns the stage-one teacher's frame posteriors into soft pseudo
labels for weak and unlabeled clips (weak-label negatives revised to 0 with
confidence 1, strong clips keep their ground truth with confidence 1) and
retrains once with the per-frame BCE weighted by ``alpha * c + 1 - alpha``,
plus the consistency term, with max pooling for clip outputs.

All randomness comes from ``RngStream(config.seed, ...)`` substreams keyed by
stage, epoch and step, so a run interrupted between epochs resumes to the
same bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import atomic_write_text
from .frame_model import (
    CONFIDENCE_HEAD,
    AdamState,
    ModelConfig,
    ModelParams,
    PredictionBundle,
    backward,
    forward,
    init_params,
    load_params,
    params_from_checkpoint,
    save_params,
    trainable_keys,
)
from .losses import (
    LossWeights,
    TargetBatch,
    consistency_loss,
    freeze,
    interpolate_confidence,
    mean_frame_loss,
    mu_schedule,
    stage1_loss,
    weighted_frame_loss,
)
from .mean_teacher import NoiseConfig, TeacherState, ema_update
from .numerics import RngStream
from .pooling import PoolKind
from .sed_metrics import (
    EventList,
    ScoreReport,
    class_windows_from_durations,
    decode_events,
    event_based_scores,
    segment_based_scores,
)
from .synthdata import Dataset, FeatureClip, TrainingClip

log = logging.getLogger(__name__)

ABLATIONS = ("none", "prob09", "prob_weighted", "prob05")


@dataclass
class TrainConfig:
    hidden_dims: tuple[int, ...] = (32,)
    context_radius: int = 2
    pooling: str = "power"
    n_init: float = 1.2
    n_sharing: str = "shared"
    n_max: float = 20.0
    allow_negative_n: bool = False
    lr: float = 1e-3
    pool_lr_scale: float = 10.0
    batch_size: int = 32
    epochs: int = 40
    confidence_epochs: int = 5
    confidence_lr: float = 1e-3
    confidence_batch_size: int = 8
    stage2_epochs: int = 20
    stage2_init: str = "warm"
    stage2_consistency: bool = True
    lam: float = 0.03
    mu_max: float = 1.0
    ramp_epochs: int = 15
    alpha: float = 1.0
    decay: float = 0.99
    shift_std: float = 16.0
    gaussian_std: float = 0.1
    ablation: str = "none"
    weighting: str = "confidence"
    threshold: float = 0.5
    median_ratio: float = 1.0 / 3.0
    seed: int = 42

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.weighting not in ("confidence", "none"):
            raise ValueError("weighting must be 'confidence' or 'none'")
        if self.stage2_init not in ("warm", "cold"):
            raise ValueError("stage2_init must be 'warm' or 'cold'")
        if self.batch_size < 1 or self.confidence_batch_size < 1:
            raise ValueError("batch sizes must be positive")
        PoolKind(self.pooling)
        self.loss_weights()

    def loss_weights(self) -> LossWeights:
        return LossWeights(lam=self.lam, mu_max=self.mu_max, ramp_epochs=self.ramp_epochs, alpha=self.alpha)

    def noise(self) -> NoiseConfig:
        return NoiseConfig(self.shift_std, self.gaussian_std)

    def model_config(self, input_dim: int, num_classes: int) -> ModelConfig:
        return ModelConfig(
            input_dim=input_dim,
            num_classes=num_classes,
            hidden_dims=self.hidden_dims,
            context_radius=self.context_radius,
            seed=self.seed,
            pooling=self.pooling,
            n_init=self.n_init,
            n_sharing=self.n_sharing,
            n_max=self.n_max,
            allow_negative_n=self.allow_negative_n,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    def digest(self, *keys) -> str:
        d = self.to_dict()
        if keys:
            d = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


STAGE1_KEYS = (
    "hidden_dims", "context_radius", "pooling", "n_init", "n_sharing", "n_max", "allow_negative_n",
    "lr", "pool_lr_scale", "batch_size", "epochs", "confidence_epochs", "confidence_lr",
    "confidence_batch_size", "lam", "mu_max", "ramp_epochs", "decay", "shift_std", "gaussian_std", "seed",
)


class NumericalFailure(FloatingPointError):
    """A loss or gradient became non-finite during training."""


@dataclass
class StageReport:
    stage: str
    rows: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoints: dict[str, str] = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    CSV_FIELDS = ("epoch", "phase", "loss", "class_frame", "class_clip", "consistency", "confidence", "mean_confidence", "mu", "n")

    @property
    def n_trajectory(self) -> list[float]:
        return [r["n"] for r in self.rows if r.get("n") is not None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        for r in self.rows:
            w.writerow([_cell(r.get(k)) for k in self.CSV_FIELDS])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "rows": self.rows,
            "n_trajectory": self.n_trajectory,
            "wall_clock": self.wall_clock,
            "checkpoints": self.checkpoints,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageReport":
        return cls(d["stage"], d["rows"], d.get("wall_clock", 0.0), d.get("checkpoints", {}), d.get("notes", {}))

    def save(self, out_dir, name: str):
        out = Path(out_dir)
        atomic_write_text(out / f"{name}_epochs.csv", self.to_csv())
        atomic_write_text(out / f"{name}_report.json", json.dumps(self.to_dict(), indent=1, sort_keys=True))


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------- batching


def stack_features(clips) -> np.ndarray:
    return np.stack([np.asarray(c.features, dtype=np.float64) for c in clips])


def roll_frames(arr: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Circularly shift each clip of a (B, T, ...) array by its own frame offset."""
    if not np.any(shifts):
        return arr
    T = arr.shape[1]
    idx = (np.arange(T)[None, :] - shifts[:, None]) % T
    return arr[np.arange(arr.shape[0])[:, None], idx]


@dataclass
class NoisyViews:
    """Student and teacher inputs of one batch with their time shifts."""

    student: np.ndarray
    teacher: np.ndarray
    student_shift: np.ndarray
    teacher_shift: np.ndarray

    def align_teacher(self, bundle: PredictionBundle) -> PredictionBundle:
        """Teacher outputs moved onto the student's frame grid.

        A circular shift only permutes frames, so clip outputs are unchanged.
        """
        frames = roll_frames(bundle.frame_probs, self.student_shift - self.teacher_shift)
        conf = roll_frames(bundle.confidence, self.student_shift - self.teacher_shift)
        return PredictionBundle(frames, bundle.clip_probs, conf, bundle.hidden)


def _draw_shifts(noise: NoiseConfig, rng: RngStream, size: int) -> np.ndarray:
    if noise.shift_std_frames <= 0:
        return np.zeros(size, dtype=np.int64)
    return np.rint(rng.generator.normal(0.0, noise.shift_std_frames, size=size)).astype(np.int64)


def noisy_views(x: np.ndarray, noise: NoiseConfig, rng: RngStream) -> NoisyViews:
    """Two independent noise draws (time shift plus Gaussian) of a (B, T, F) batch."""
    B = x.shape[0]
    views = []
    for role in ("student", "teacher"):
        sub = rng.substream(role)
        shift = _draw_shifts(noise, sub.substream("shift"), B)
        v = roll_frames(x, shift)
        if noise.gaussian_std > 0:
            v = v + sub.substream("gaussian").generator.normal(0.0, noise.gaussian_std, size=x.shape)
        views.append((v, shift))
    return NoisyViews(views[0][0], views[1][0], views[0][1], views[1][1])


def epoch_order(seed: int, stage: str, epoch: int, n: int) -> np.ndarray:
    return RngStream(seed, "shuffle", stage, epoch).generator.permutation(n)


def _check_finite(value: float, what: str):
    if not np.isfinite(value):
        raise NumericalFailure(f"non-finite {what}")


# ---------------------------------------------------------------- state files


def _save_state(path, header: dict, student: ModelParams, teacher: TeacherState, adam: AdamState | None):
    arrays = {}
    for k, v in student.arrays.items():
        arrays[f"student/{k}"] = v
    for k, v in teacher.params.arrays.items():
        arrays[f"teacher/{k}"] = v
    if adam is not None:
        for k in adam.m:
            arrays[f"adam.m/{k}"] = adam.m[k]
            arrays[f"adam.v/{k}"] = adam.v[k]
        header = dict(header, adam_t=adam.t)
    header = dict(header, format="milpool-train-state")
    header.update(student.header())
    checkpoint.save(path, header, arrays)


def _load_state(path, decay: float):
    header, arrays = checkpoint.load(path)
    if header.get("format") != "milpool-train-state":
        raise checkpoint.CheckpointError(f"{path} is not a training state file")
    student = params_from_checkpoint(header, arrays, "student/")
    teacher = TeacherState(params_from_checkpoint(header, arrays, "teacher/"), decay)
    adam = None
    if "adam_t" in header:
        m = {k[7:]: v for k, v in arrays.items() if k.startswith("adam.m/")}
        v = {k[7:]: val for k, val in arrays.items() if k.startswith("adam.v/")}
        adam = AdamState(m, v, header["adam_t"])
    return header, student, teacher, adam


# ---------------------------------------------------------------- stage one


@dataclass
class StageResult:
    student: ModelParams
    teacher: ModelParams
    report: StageReport
    student_path: Path | None = None
    teacher_path: Path | None = None


def _lr_scale(params: ModelParams, config: TrainConfig) -> dict[str, float]:
    return {k: config.pool_lr_scale for k in params.arrays if k.startswith("pool.")}


def _stage1_epoch(phase, epoch, student, teacher, adam, X, targets: TargetBatch, config, stage_tag):
    weights = config.loss_weights()
    noise = config.noise()
    if phase == "classification":
        bsize, lr = config.batch_size, config.lr
        pool = np.arange(X.shape[0])
    else:
        bsize, lr = config.confidence_batch_size, config.confidence_lr
        pool = np.flatnonzero(targets.has_frame)
    keys = trainable_keys(student, phase)
    scale = _lr_scale(student, config)
    order = pool[epoch_order(config.seed, f"{stage_tag}-{phase}", epoch, pool.size)]
    sums = {"loss": 0.0, "class_frame": 0.0, "class_clip": 0.0, "consistency": 0.0, "confidence": 0.0, "mean_confidence": 0.0}
    steps = strong_steps = 0
    for step, start in enumerate(range(0, order.size, bsize)):
        idx = np.sort(order[start : start + bsize])
        rng = RngStream(config.seed, "noise", stage_tag, phase, epoch, step)
        nv = noisy_views(X[idx], noise, rng)
        xs = nv.student
        tb = TargetBatch(
            roll_frames(targets.t_frame[idx], nv.student_shift), targets.t_clip[idx], targets.has_frame[idx], targets.has_clip[idx]
        )
        bs = forward(xs, student, train_mode=True)
        bt = nv.align_teacher(forward(nv.teacher, teacher.params, train_mode=True))
        sl = stage1_loss(bs, bt, tb, epoch, weights, phase)
        _check_finite(sl.total, "stage-one loss")
        grads = freeze(backward(xs, student, bs, sl.grads, skip_trunk=phase == "confidence"), student, phase)
        student, adam = optimizer_step_checked(student, grads, adam, lr, keys, scale)
        teacher = ema_update(teacher, student, exclude=CONFIDENCE_HEAD if phase == "confidence" else ())
        sums["loss"] += sl.total
        for k in ("class_frame", "class_clip", "consistency", "confidence"):
            sums[k] += sl.components[k]
        strong = tb.has_frame
        if strong.any():
            sums["mean_confidence"] += float(bs.confidence[strong].mean())
            strong_steps += 1
        steps += 1
    row = {k: v / max(steps, 1) for k, v in sums.items()}
    row["mean_confidence"] = sums["mean_confidence"] / max(strong_steps, 1)
    row.update(epoch=epoch, phase=phase, mu=mu_schedule(epoch, weights))
    n = student.arrays.get("pool.n")
    row["n"] = float(np.mean(n)) if n is not None else None
    return student, teacher, adam, row


def optimizer_step_checked(student, grads, adam, lr, keys, scale):
    from .frame_model import optimizer_step

    try:
        return optimizer_step(student, grads, adam, lr, trainable=keys, lr_scale=scale)
    except FloatingPointError as exc:
        raise NumericalFailure(str(exc)) from exc


def train_stage1(clips: list[TrainingClip], config: TrainConfig, out_dir=None, stop_after: int | None = None) -> StageResult | None:
    """Phase A (classification + consistency) then phase B (confidence head only).

    With ``out_dir`` set, a resumable state file is written after every epoch
    and final student/teacher checkpoints plus the report are emitted.
    ``stop_after`` ends the call after that many epochs of this invocation
    (used to exercise resumption); it then returns ``None``.
    """
    if not clips:
        raise ValueError("empty dataset")
    X = stack_features(clips)
    T, C = X.shape[1], _num_classes(clips)
    targets = TargetBatch.stack([c.targets for c in clips], T, C)
    if not targets.has_frame.any():
        raise ValueError("stage one needs at least one strongly labelled clip")
    out = Path(out_dir) if out_dir is not None else None
    state_path = out / "stage1_state.ckpt" if out else None
    digest = config.digest(*STAGE1_KEYS)
    started = time.perf_counter()
    student = init_params(config.model_config(X.shape[2], C))
    teacher = TeacherState.from_student(student, config.decay)
    adam = AdamState.zeros(student)
    report = StageReport("stage1")
    done = 0
    if state_path is not None and state_path.exists():
        header, student, teacher, adam = _load_state(state_path, config.decay)
        if header.get("config_digest") != digest:
            raise ValueError(f"{state_path} was written with a different configuration")
        report = StageReport.from_dict(header["report"])
        done = header["epochs_done"]
    total = config.epochs + config.confidence_epochs
    ran = 0
    while done < total:
        if stop_after is not None and ran >= stop_after:
            return None
        if done == config.epochs:
            adam = AdamState.zeros(student)
        phase = "classification" if done < config.epochs else "confidence"
        student, teacher, adam, row = _stage1_epoch(phase, done, student, teacher, adam, X, targets, config, "stage1")
        report.rows.append(row)
        log.info("stage1 epoch %d %s loss=%.5f n=%s", done, phase, row["loss"], row["n"])
        done += 1
        ran += 1
        if state_path is not None:
            _save_state(state_path, {"config_digest": digest, "epochs_done": done, "report": report.to_dict()}, student, teacher, adam)
    report.wall_clock = time.perf_counter() - started
    result = StageResult(student, teacher.params, report)
    if out is not None:
        curve = [r["loss"] for r in report.rows]
        result.student_path = out / "stage1_student.ckpt"
        result.teacher_path = out / "stage1_teacher.ckpt"
        extra = {"stage": 1, "train_config": config.to_dict()}
        save_params(result.student_path, student, "student", total, curve, extra)
        save_params(result.teacher_path, teacher.params, "teacher", total, curve, extra)
        report.checkpoints = {"student": result.student_path.name, "teacher": result.teacher_path.name}
        report.save(out, "stage1")
    return result


def _num_classes(clips) -> int:
    for c in clips:
        t = c.targets
        if t.t_clip is not None:
            return t.t_clip.shape[0]
    raise ValueError("no labelled clip to infer the class count from")


# ---------------------------------------------------------------- pseudo labels


class Provenance(str, Enum):
    STRONG = "strong-groundtruth"
    WEAK = "weak-revised"
    UNLABELED = "unlabeled-raw"


@dataclass
class PseudoLabel:
    """Retraining targets for one clip.

    ``predicted`` marks entries that came from the model (as opposed to
    ground truth or a weak-label revision); only those are touched by the
    ablation filters.
    """

    id: str
    targets: np.ndarray
    confidence: np.ndarray
    provenance: Provenance
    predicted: np.ndarray


@dataclass
class PseudoLabelSet:
    labels: list[PseudoLabel]

    def __len__(self):
        return len(self.labels)

    def by_id(self) -> dict[str, PseudoLabel]:
        return {p.id: p for p in self.labels}


def predict(params: ModelParams, features, batch_size: int = 64) -> PredictionBundle:
    """Noise-free forward over many clips; returns a batched bundle."""
    X = features if isinstance(features, np.ndarray) else stack_features(features)
    if X.ndim == 2:
        X = X[None]
    parts = [forward(X[i : i + batch_size], params) for i in range(0, X.shape[0], batch_size)]
    return PredictionBundle(
        np.concatenate([p.frame_probs for p in parts]),
        np.concatenate([p.clip_probs for p in parts]),
        np.concatenate([p.confidence for p in parts]),
        np.concatenate([p.hidden for p in parts]),
    )


def generate_pseudo_labels(teacher: ModelParams, clips: list[TrainingClip]) -> PseudoLabelSet:
    """Soft frame targets and confidence from the stage-one model, with revision rules."""
    bundle = predict(teacher, clips)
    out = []
    for i, clip in enumerate(clips):
        t = clip.targets
        post = bundle.frame_probs[i].copy()
        conf = bundle.confidence[i].copy()
        if t.t_frame is not None:
            ones = np.ones_like(post)
            out.append(PseudoLabel(clip.id, t.t_frame.copy(), ones, Provenance.STRONG, np.zeros(post.shape, dtype=bool)))
        elif t.t_clip is not None:
            absent = t.t_clip < 0.5
            post[:, absent] = 0.0
            conf[:, absent] = 1.0
            predicted = np.broadcast_to(~absent, post.shape).copy()
            out.append(PseudoLabel(clip.id, post, conf, Provenance.WEAK, predicted))
        else:
            out.append(PseudoLabel(clip.id, post, conf, Provenance.UNLABELED, np.ones(post.shape, dtype=bool)))
    return PseudoLabelSet(out)


def stage2_targets(pseudo: PseudoLabelSet, config: TrainConfig) -> tuple[np.ndarray, np.ndarray, dict]:
    """Targets and frame weights for retraining, after the configured ablation.

    ``none``: confidence-weighted soft labels. ``prob09``: predicted entries
    with posterior >= 0.9 become hard positives with weight 1, the rest are
    dropped. ``prob_weighted``: the posterior stands in for the confidence.
    ``prob05``: predicted entries below 0.5 are dropped, the rest keep their
    confidence weights.
    """
    targets = np.stack([p.targets for p in pseudo.labels])
    conf = np.stack([p.confidence for p in pseudo.labels])
    predicted = np.stack([p.predicted for p in pseudo.labels])
    post = np.where(predicted, targets, 0.0)
    keep = np.ones(targets.shape, dtype=bool)
    mode = config.ablation
    if mode == "prob09":
        keep = ~predicted | (post >= 0.9)
        targets = np.where(predicted, 1.0, targets)
        weights = np.ones(targets.shape)
    elif mode == "prob_weighted":
        weights = interpolate_confidence(np.where(predicted, post, 1.0), config.alpha)
    elif mode == "prob05":
        keep = ~predicted | (post >= 0.5)
        weights = interpolate_confidence(conf, config.alpha)
    else:
        weights = interpolate_confidence(conf, config.alpha)
    weights = np.where(keep, weights, 0.0)
    stats = {
        "ablation": mode,
        "predicted_entries": int(predicted.sum()),
        "discarded_entries": int((~keep).sum()),
        "alpha": config.alpha,
        "confidence_free": bool(config.alpha == 0.0 or config.weighting == "none"),
    }
    return targets, weights, stats


def _stage2_epoch(epoch, student, teacher, adam, X, targets, weights, config):
    noise = config.noise()
    lw = config.loss_weights()
    keys = trainable_keys(student, "classification")
    order = epoch_order(config.seed, "stage2", epoch, X.shape[0])
    sums = {"loss": 0.0, "class_frame": 0.0, "consistency": 0.0}
    steps = 0
    step_losses = []
    for step, start in enumerate(range(0, order.size, config.batch_size)):
        idx = np.sort(order[start : start + config.batch_size])
        rng = RngStream(config.seed, "noise", "stage2", epoch, step)
        nv = noisy_views(X[idx], noise, rng)
        xs = nv.student
        tgt = roll_frames(targets[idx], nv.student_shift)
        bs = forward(xs, student, train_mode=True)
        if config.weighting == "none":
            frame = mean_frame_loss(bs.frame_probs, tgt)
        else:
            w = roll_frames(weights[idx], nv.student_shift)
            frame = weighted_frame_loss(bs.frame_probs, tgt, w) if w.sum() > 0 else None
        grads = {"frame_probs": np.zeros_like(bs.frame_probs)} if frame is None else dict(frame.grads)
        total = 0.0 if frame is None else frame.value
        con_value = 0.0
        mu = mu_schedule(epoch, lw)
        if config.stage2_consistency:
            bt = nv.align_teacher(forward(nv.teacher, teacher.params, train_mode=True))
            con = consistency_loss(bs, bt)
            con_value = con.value
            grads["frame_probs"] = grads["frame_probs"] + mu * con.grads["frame_probs"]
            grads["clip_probs"] = mu * con.grads["clip_probs"]
            total += mu * con.value
        _check_finite(total, "stage-two loss")
        pgrads = freeze(backward(xs, student, bs, grads), student, "classification")
        student, adam = optimizer_step_checked(student, pgrads, adam, config.lr, keys, None)
        teacher = ema_update(teacher, student)
        sums["loss"] += total
        sums["class_frame"] += 0.0 if frame is None else frame.value
        sums["consistency"] += con_value
        step_losses.append(total)
        steps += 1
    row = {k: v / max(steps, 1) for k, v in sums.items()}
    row.update(epoch=epoch, phase="retrain", mu=mu_schedule(epoch, lw), n=None, class_clip=0.0, confidence=0.0)
    return student, teacher, adam, row, step_losses


def train_stage2(pseudo: PseudoLabelSet, clips: list[TrainingClip], config: TrainConfig, init: ModelParams, out_dir=None, stop_after: int | None = None) -> StageResult | None:
    """Retrain once on pseudo labels, clip outputs by max pooling.

    ``init`` is the stage-one student; with ``stage2_init='cold'`` only its
    configuration is reused and the weights are re-drawn.
    """
    if len(pseudo) == 0:
        raise ValueError("empty pseudo-label set")
    by_id = {c.id: c for c in clips}
    X = stack_features([by_id[p.id] for p in pseudo.labels])
    targets, weights, stats = stage2_targets(pseudo, config)
    if config.weighting != "none" and weights.sum() <= 0:
        raise ValueError("all retraining weights are zero")
    base = init.copy() if config.stage2_init == "warm" else init_params(init.config)
    student = base.with_pooling_kind(PoolKind.MAX)
    teacher = TeacherState.from_student(student, config.decay)
    adam = AdamState.zeros(student)
    out = Path(out_dir) if out_dir is not None else None
    state_path = out / "stage2_state.ckpt" if out else None
    digest = config.digest()
    report = StageReport("stage2", notes=dict(stats))
    report.notes["step_losses"] = []
    done = 0
    if state_path is not None and state_path.exists():
        header, student, teacher, adam = _load_state(state_path, config.decay)
        if header.get("config_digest") != digest:
            raise ValueError(f"{state_path} was written with a different configuration")
        report = StageReport.from_dict(header["report"])
        done = header["epochs_done"]
    started = time.perf_counter()
    ran = 0
    while done < config.stage2_epochs:
        if stop_after is not None and ran >= stop_after:
            return None
        student, teacher, adam, row, losses = _stage2_epoch(done, student, teacher, adam, X, targets, weights, config)
        report.rows.append(row)
        report.notes["step_losses"].extend(losses)
        log.info("stage2 epoch %d loss=%.5f", done, row["loss"])
        done += 1
        ran += 1
        if state_path is not None:
            _save_state(state_path, {"config_digest": digest, "epochs_done": done, "report": report.to_dict()}, student, teacher, adam)
    report.wall_clock = time.perf_counter() - started
    result = StageResult(student, teacher.params, report)
    if out is not None:
        curve = [r["loss"] for r in report.rows]
        result.student_path = out / "stage2_student.ckpt"
        result.teacher_path = out / "stage2_teacher.ckpt"
        extra = {"stage": 2, "train_config": config.to_dict(), "retrain": stats}
        save_params(result.student_path, student, "student", done, curve, extra)
        save_params(result.teacher_path, teacher.params, "teacher", done, curve, extra)
        report.checkpoints = {"student": result.student_path.name, "teacher": result.teacher_path.name}
        report.save(out, "stage2")
    return result


# ---------------------------------------------------------------- evaluation


def load_model(path) -> ModelParams:
    params, _ = load_params(path)
    return params


def decode_all(frame_probs: np.ndarray, windows, threshold: float, frame_rate: float) -> list[EventList]:
    return [decode_events(p, threshold, windows, frame_rate) for p in frame_probs]


@dataclass
class Evaluation:
    report: ScoreReport
    estimates: dict[str, EventList]
    bundle: PredictionBundle
    windows: list[int]

    @property
    def event_er(self) -> float:
        return self.report.event.macro()["ER"]


def evaluate(params: ModelParams, clips: list[FeatureClip], dataset: Dataset, threshold: float = 0.5, median_ratio: float = 1.0 / 3.0) -> Evaluation:
    """Predict, decode with class-proportional median filters, and score both blocks."""
    spec = dataset.spec
    windows = class_windows_from_durations(dataset.strong_mean_durations(), spec.frame_rate, median_ratio)
    bundle = predict(params, clips)
    est = decode_all(bundle.frame_probs, windows, threshold, spec.frame_rate)
    refs = [c.hidden_truth for c in clips]
    ev = event_based_scores(refs, est, num_classes=spec.num_classes).event
    seg = segment_based_scores(refs, est, spec.clip_seconds, num_classes=spec.num_classes).segment
    return Evaluation(ScoreReport(ev, seg), {c.id: e for c, e in zip(clips, est)}, bundle, windows)


@dataclass
class PipelineResult:
    stage1: StageResult
    stage2: StageResult
    pseudo: PseudoLabelSet
    eval_stage1: Evaluation | None
    eval_stage2: Evaluation | None


def run_pipeline(dataset: Dataset, config: TrainConfig, out_dir=None, evaluate_split: str = "validation") -> PipelineResult:
    clips = dataset.training_view()
    s1 = train_stage1(clips, config, out_dir)
    pseudo = generate_pseudo_labels(s1.teacher, clips)
    s2 = train_stage2(pseudo, clips, config, s1.student, out_dir)
    held_out = dataset.split(evaluate_split)
    e1 = evaluate(s1.teacher, held_out, dataset, config.threshold, config.median_ratio) if held_out else None
    e2 = evaluate(s2.teacher, held_out, dataset, config.threshold, config.median_ratio) if held_out else None
    if out_dir is not None and held_out:
        out = Path(out_dir)
        atomic_write_text(out / "stage1_scores.csv", e1.report.event.to_csv())
        atomic_write_text(out / "stage2_scores.csv", e2.report.event.to_csv())
        atomic_write_text(out / "stage1_segment_scores.csv", e1.report.segment.to_csv())
        atomic_write_text(out / "stage2_segment_scores.csv", e2.report.segment.to_csv())
    return PipelineResult(s1, s2, pseudo, e1, e2)
