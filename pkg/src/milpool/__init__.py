"""Power pooling for weakly supervised sound event detection, with a
confidence-weighted mean-teacher retraining stage.

The numeric hot spots (power pooling forward/backward, binary median filter)
come from a compiled extension when it is built and from numpy otherwise;
``BACKEND`` says which one is active.
"""

from ._backend import BACKEND
from .frame_model import ModelConfig, ModelParams, PredictionBundle, backward, forward, init_params
from .mean_teacher import NoiseConfig, TeacherState, apply_noise, ema_update
from .pipeline import (
    TrainConfig,
    evaluate,
    generate_pseudo_labels,
    predict,
    run_pipeline,
    train_stage1,
    train_stage2,
)
from .pooling import PoolingSpec, PoolKind, pool_backward, pool_forward
from .sed_metrics import EventList, decode_events, event_based_scores, segment_based_scores
from .synthdata import DatasetSpec, generate_dataset, load_dataset, save_dataset

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DatasetSpec",
    "EventList",
    "ModelConfig",
    "ModelParams",
    "NoiseConfig",
    "PoolKind",
    "PoolingSpec",
    "PredictionBundle",
    "TeacherState",
    "TrainConfig",
    "apply_noise",
    "backward",
    "decode_events",
    "ema_update",
    "evaluate",
    "event_based_scores",
    "forward",
    "generate_dataset",
    "generate_pseudo_labels",
    "init_params",
    "load_dataset",
    "pool_backward",
    "pool_forward",
    "predict",
    "run_pipeline",
    "save_dataset",
    "segment_based_scores",
    "train_stage1",
    "train_stage2",
]
