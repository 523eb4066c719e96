"""Batch-normalized Inception classifier for 50x50 histopathology patches.

Built from scratch on numpy: tensors with a gradient tape, the layers and
the four-branch Inception block, the Adam/plateau/early-stop training
protocol, evaluation metrics, and whole-slide heatmap rendering.
"""

__version__ = "0.1.0"

from .layers import BatchNormState, LayerMode, batch_norm, dropout, relu, softmax_cross_entropy
from .model import InceptionBlock, InceptionBlockSpec, Model, ModelConfig, build_model
from .optim import AdamState, TrainConfig, adam_step, early_stop_check, plateau_scheduler_step
from .tensor import GradTape, ShapeError, Tensor, concat_channels, conv2d, dense, maxpool2d
from .train import EpochRecord, TrainResult, train

__all__ = [
    "AdamState",
    "BatchNormState",
    "EpochRecord",
    "GradTape",
    "InceptionBlock",
    "InceptionBlockSpec",
    "LayerMode",
    "Model",
    "ModelConfig",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "batch_norm",
    "build_model",
    "concat_channels",
    "conv2d",
    "dense",
    "dropout",
    "early_stop_check",
    "maxpool2d",
    "plateau_scheduler_step",
    "relu",
    "softmax_cross_entropy",
    "train",
]
