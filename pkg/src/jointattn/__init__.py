"""Multi-branch attention LSTM for video action recognition, on a small
numpy autograd engine."""

from .config import ModelConfig
from .data import Dataset, SyntheticVideo, generate, read_dataset, write_dataset
from .errors import ConfigError, ContractError, DimensionError, FormatError, JointAttnError
from .model import Model, build_model
from .tensor import Tensor, backward, detach, no_grad

__all__ = [
    "ConfigError",
    "ContractError",
    "Dataset",
    "DimensionError",
    "FormatError",
    "JointAttnError",
    "Model",
    "ModelConfig",
    "SyntheticVideo",
    "Tensor",
    "backward",
    "build_model",
    "detach",
    "generate",
    "no_grad",
    "read_dataset",
    "write_dataset",
]
