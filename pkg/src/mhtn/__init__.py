"""Hybrid transfer network for cross-modal retrieval over precomputed features."""

from ._accel import backend_name
from .autodiff import ParamGroup, Tape, sgd_step
from .data import Dataset, SyntheticSpec, generate_synthetic, load_features, split, write_features
from .losses import KernelSpec, LossBundle, LossWeights
from .network import NetworkConfig, StarNetwork
from .retrieval import average_precision, evaluate_all, evaluate_task
from .trainer import TrainSchedule, assemble_documents, train, train_step

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "KernelSpec",
    "LossBundle",
    "LossWeights",
    "NetworkConfig",
    "ParamGroup",
    "StarNetwork",
    "SyntheticSpec",
    "Tape",
    "TrainSchedule",
    "assemble_documents",
    "average_precision",
    "backend_name",
    "evaluate_all",
    "evaluate_task",
    "generate_synthetic",
    "load_features",
    "sgd_step",
    "split",
    "train",
    "train_step",
    "write_features",
]
