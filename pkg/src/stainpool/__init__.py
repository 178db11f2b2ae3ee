"""Multistain patient graphs with graph attention and stain-aware attention pooling."""

from .dataset import Dataset, PatientSample
from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    GraphError,
    ShapeError,
    StainPoolError,
    TrainingError,
)
from .graph import PatientGraph, build_patient_graph
from .model import ModelConfig, forward, init_params, load_checkpoint, predict_proba, save_checkpoint
from .training import TrainConfig, evaluate, stratified_split, train_fold

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Dataset",
    "DomainError",
    "FormatError",
    "GraphError",
    "ModelConfig",
    "PatientGraph",
    "PatientSample",
    "ShapeError",
    "StainPoolError",
    "TrainConfig",
    "TrainingError",
    "build_patient_graph",
    "evaluate",
    "forward",
    "init_params",
    "load_checkpoint",
    "predict_proba",
    "save_checkpoint",
    "stratified_split",
    "train_fold",
]
