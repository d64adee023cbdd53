"""Adapter-based parameter-efficient fine-tuning for a frozen
text-conditioned segmentation backbone, on a self-contained autodiff core."""

__version__ = "0.1.0"

from .tensor import Tensor, Parameter  # noqa: F401
