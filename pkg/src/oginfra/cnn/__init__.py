"""A small numpy CNN for binary image classification."""

from oginfra.cnn.network import LayerKind, LayerSpec, Network, build_classifier
from oginfra.cnn.train import (
    EarlyStopping,
    EpochStats,
    TrainConfig,
    TrainingData,
    bce_loss,
    predict,
    train,
)

__all__ = [
    "EarlyStopping",
    "EpochStats",
    "LayerKind",
    "LayerSpec",
    "Network",
    "TrainConfig",
    "TrainingData",
    "bce_loss",
    "build_classifier",
    "predict",
    "train",
]
