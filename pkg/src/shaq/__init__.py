"""Byte-level SHA-RNN / SHAQ language-modelling lab on a small numpy autodiff core."""

from .config import ModelConfig, param_count, sharnn_config, shaq_config
from .model import Model, build_model
from .tensor import Parameter, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "Model",
    "Parameter",
    "Tensor",
    "build_model",
    "no_grad",
    "param_count",
    "sharnn_config",
    "shaq_config",
]
