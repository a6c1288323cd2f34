"""Underwater monocular depth estimation on a small numpy autodiff engine."""

from .autograd import Tensor, backward, finite_diff_check, no_grad, precision, tensor
from .model import UMono

__version__ = "0.1.0"

__all__ = ["Tensor", "UMono", "backward", "finite_diff_check", "no_grad", "precision", "tensor"]
