"""Desk-scale spatiotemporal residual predictive model for video prediction."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .estimator import STRPMPredictor
from .model import DESK, FULL_SCALE, ModelConfig, STRPMNet, count_flops, count_params, rollout
from .objectives import Discriminator, LossWeights
from .training import TrainSettings, ablate, dump_features, evaluate, train

__all__ = [
    "Checkpoint", "DESK", "Discriminator", "FULL_SCALE", "LossWeights", "ModelConfig",
    "STRPMNet", "STRPMPredictor", "TrainSettings", "ablate", "count_flops", "count_params",
    "dump_features", "evaluate", "load_checkpoint", "rollout", "save_checkpoint", "train",
]

__version__ = "0.1.0"
