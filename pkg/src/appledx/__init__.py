"""Apple leaf disease classification with a from-scratch ResNet-34."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import CLASSES, AugmentConfig, DatasetManifest, SampleRecord, augment, batch_iterator, load_and_resize, split_dataset
from .metrics import ConfusionMatrix, binary_counts, compute_report, emit_report, parse_cm
from .model import Model, ModelSpec, build_resnet34, replace_head
from .tensor import Tensor, backward, default_dtype, no_grad
from .trainer import EpochLog, TrainConfig, evaluate, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "CLASSES", "AugmentConfig", "ConfusionMatrix", "DatasetManifest", "EpochLog", "Model", "ModelSpec",
    "SampleRecord", "Tensor", "TrainConfig", "augment", "backward", "batch_iterator", "binary_counts",
    "build_resnet34", "compute_report", "default_dtype", "emit_report", "evaluate", "load_and_resize",
    "load_checkpoint", "no_grad", "parse_cm", "replace_head", "save_checkpoint", "sgd_step", "split_dataset",
    "train",
]
