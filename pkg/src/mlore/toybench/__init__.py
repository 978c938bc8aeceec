"""Synthetic multi-task benchmark: data, backbone, losses, metrics and training."""

from .data import ToyDataset, gen_dataset
from .model import MultiTaskModel
from .tasks import MetricsReport, delta_m, task_losses
from .train import TrainSettings, TrainingDiverged, evaluate, load_checkpoint, train

__all__ = [
    "MetricsReport",
    "MultiTaskModel",
    "ToyDataset",
    "TrainSettings",
    "TrainingDiverged",
    "delta_m",
    "evaluate",
    "gen_dataset",
    "load_checkpoint",
    "task_losses",
    "train",
]
