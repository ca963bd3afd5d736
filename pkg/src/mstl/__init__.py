"""Multi-source transfer learning for 32x32 texture patch CNNs.

A small numpy training engine, the fixed patch-CNN family, layer-wise
transfer, greedy ensemble selection, distillation into a single student
and a multi-task baseline.
"""
from .errors import (FormatError, GraphError, ManifestError, MstlError, ShapeError, TrainingError, TruncatedError,
                     ValidationError)
from .metrics import confusion, f_avg
from .model import ArchitectureSpec, Model, build_model, load_checkpoint, save_checkpoint
from .optim import TrainConfig, fit
from .tensor import RngStream, Tensor

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec", "FormatError", "GraphError", "ManifestError", "Model", "MstlError", "RngStream",
    "ShapeError", "Tensor", "TrainConfig", "TrainingError", "TruncatedError", "ValidationError", "build_model",
    "confusion", "f_avg", "fit", "load_checkpoint", "save_checkpoint",
]
