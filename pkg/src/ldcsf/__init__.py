"""LDCSF: shifted-window transformer with local depthwise convolution and
channel feature reconstruction for multi-label histopathology tiles."""

from ._backend import get_backend, set_backend, use_backend
from .model import LABELS, LdcsfModel, ModelConfig, multilabel_loss
from .tensor import Tensor, backward, no_grad, parameter
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "LABELS",
    "LdcsfModel",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "backward",
    "get_backend",
    "multilabel_loss",
    "no_grad",
    "parameter",
    "set_backend",
    "train",
    "use_backend",
]
