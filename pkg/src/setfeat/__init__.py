"""Few-shot image classification with set-of-features representations."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad, set_precision, get_precision  # noqa: F401
