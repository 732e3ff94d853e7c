"""Dense U-Net segmentation with attention gates and BD-LSTM skip fusion, on a small numpy autodiff core."""

from .model import VARIANTS, Model, ModelConfig, build, build_variant, load_weights, save_weights
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "VARIANTS",
    "Model",
    "ModelConfig",
    "Tape",
    "Tensor",
    "backward",
    "build",
    "build_variant",
    "load_weights",
    "save_weights",
]
