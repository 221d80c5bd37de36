"""Reweighted teachers for knowledge distillation, on a numpy autodiff core."""

from .errors import RememError

__version__ = "0.1.0"
__all__ = ["RememError", "__version__"]
