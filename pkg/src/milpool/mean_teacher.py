"""Teacher weights as an exponential moving average of the student, and input noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frame_model import ModelParams
from .losses import Availability, FrameTargets
from .numerics import RngStream


@dataclass(frozen=True)
class NoiseConfig:
    shift_std_frames: float = 16.0
    gaussian_std: float = 0.1
    stream: str = "noise"

    def __post_init__(self):
        if self.shift_std_frames < 0 or self.gaussian_std < 0:
            raise ValueError("noise standard deviations must be non-negative")


def draw_shift(cfg: NoiseConfig, rng: RngStream) -> int:
    if cfg.shift_std_frames == 0:
        return 0
    return int(np.rint(rng.generator.normal(0.0, cfg.shift_std_frames)))


def apply_noise(features, labels: FrameTargets | None, cfg: NoiseConfig, rng: RngStream, shift: int | None = None):
    """Circular time shift (labels move with the frames) plus Gaussian feature noise.

    ``shift`` overrides the random draw so that two noisy views of a clip can
    share one alignment.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] < 1:
        raise ValueError("clip has no frames")
    s = draw_shift(cfg, rng) if shift is None else int(shift)
    if s:
        x = np.roll(x, s, axis=0)
        if labels is not None and labels.availability is Availability.STRONG:
            labels = FrameTargets.strong(np.roll(labels.t_frame, s, axis=0))
    if cfg.gaussian_std > 0:
        x = x + rng.generator.normal(0.0, cfg.gaussian_std, size=x.shape)
    return x, labels


@dataclass
class TeacherState:
    params: ModelParams
    decay: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")

    @classmethod
    def from_student(cls, student: ModelParams, decay: float = 0.999) -> "TeacherState":
        return cls(student.copy(), decay)


def ema_update(teacher: TeacherState, student: ModelParams, exclude=()) -> TeacherState:
    """``teacher <- decay * teacher + (1 - decay) * student`` for every array.

    Names in ``exclude`` are copied from the student outright.
    """
    if teacher.params.arrays.keys() != student.arrays.keys():
        raise ValueError("teacher and student parameter sets differ")
    d = teacher.decay
    new = {}
    for k, t in teacher.params.arrays.items():
        s = student.arrays[k]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {k}: {t.shape} vs {s.shape}")
        new[k] = s.copy() if k in exclude else d * t + (1.0 - d) * s
    params = ModelParams(teacher.params.config, new, teacher.params.pooling_template)
    return TeacherState(params, d)
