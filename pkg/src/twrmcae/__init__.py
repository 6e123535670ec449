"""Subspace-guided augmentation of through-wall radar range-time and Doppler-time maps."""

from .core import RadarConfig, ShapeError, make_rng, tensor_io_read, tensor_io_write
from .pipeline import DatasetConfig, make_dataset, process_echo
from .trainer import MCAEModel, ModelConfig, TrainConfig, augment, init_model, load_model, save_model, train

__all__ = [
    "DatasetConfig",
    "MCAEModel",
    "ModelConfig",
    "RadarConfig",
    "ShapeError",
    "TrainConfig",
    "augment",
    "init_model",
    "load_model",
    "make_dataset",
    "make_rng",
    "process_echo",
    "save_model",
    "tensor_io_read",
    "tensor_io_write",
    "train",
]
