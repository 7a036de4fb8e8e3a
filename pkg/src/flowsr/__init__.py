"""Synthetic dual-venc 4D flow MRI, patch-based super-resolution GAN training and evaluation."""

from .errors import ConfigError, DimensionError, FlowSRError, InfeasibleError, NumericalError, ValidationError
from .io import __version__

__all__ = [
    "ConfigError",
    "DimensionError",
    "FlowSRError",
    "InfeasibleError",
    "NumericalError",
    "ValidationError",
    "__version__",
]
