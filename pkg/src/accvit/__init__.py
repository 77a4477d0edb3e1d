"""Atrous attention vision transformers on a small numpy autodiff engine."""

from .errors import AccVitError
from .model import PUBLISHED_VARIANTS, VARIANTS, AccVitModel, ModelConfig, build, get_config
from .tensor import Tensor, no_grad

__all__ = [
    "AccVitError", "AccVitModel", "ModelConfig", "PUBLISHED_VARIANTS", "Tensor", "VARIANTS",
    "build", "get_config", "no_grad",
]
__version__ = "0.1.0"
