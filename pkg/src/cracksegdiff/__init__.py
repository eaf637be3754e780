"""Diffusion-based crack segmentation on fused grayscale and range images."""

from .backbone import CrackSegDiff, ModelConfig
from .data import FusedSample, SynthConfig, load_find_dataset, make_split, synth_generate, write_dataset
from .diffusion import NoiseSchedule, build_schedule, convert_param, posterior_stats, q_sample, q_step, reverse_step
from .errors import (
    ConfigError,
    ContractError,
    CrackSegDiffError,
    DegenerateStepError,
    IngestionError,
    TrainingError,
)
from .fusion import ChannelFusion, ShallowCompensation
from .losses import LossConfig, dice_bce_loss, mse_loss, total_loss
from .metrics import ConfusionCounts, MetricsReport, bf_score, confusion, scores
from .pipeline import Checkpoint, TrainConfig, Trainer, evaluate, evaluate_checkpoint, predict, sample, train
from .store import ParameterStore

__all__ = [
    "ChannelFusion",
    "Checkpoint",
    "ConfigError",
    "ConfusionCounts",
    "ContractError",
    "CrackSegDiff",
    "CrackSegDiffError",
    "DegenerateStepError",
    "FusedSample",
    "IngestionError",
    "LossConfig",
    "MetricsReport",
    "ModelConfig",
    "NoiseSchedule",
    "ParameterStore",
    "ShallowCompensation",
    "SynthConfig",
    "TrainConfig",
    "Trainer",
    "TrainingError",
    "bf_score",
    "build_schedule",
    "confusion",
    "convert_param",
    "dice_bce_loss",
    "evaluate",
    "evaluate_checkpoint",
    "load_find_dataset",
    "make_split",
    "mse_loss",
    "posterior_stats",
    "predict",
    "q_sample",
    "q_step",
    "reverse_step",
    "sample",
    "scores",
    "synth_generate",
    "total_loss",
    "train",
    "write_dataset",
]
