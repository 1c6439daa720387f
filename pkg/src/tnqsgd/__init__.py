"""Truncated non-uniform gradient quantization for distributed SGD."""

from .errors import TNQError
from .quantizer import QuantConfig, QuantizationGrid, Scheme

__version__ = "0.1.0"

__all__ = ["QuantConfig", "QuantizationGrid", "Scheme", "TNQError", "__version__"]
