"""fscnet: fuzzy sigmoid convolution networks on a self-contained
numpy autodiff engine, with the training, data, robustness, and
evaluation machinery for binary MRI tumor screening."""

from .tensor import Tensor, ShapeError, no_grad
from .layers import FscNet, FuzzySigConv, Mofu, Tofu, count_parameters, fuzzy_membership

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ShapeError", "no_grad",
    "FscNet", "FuzzySigConv", "Tofu", "Mofu",
    "count_parameters", "fuzzy_membership",
    "__version__",
]
