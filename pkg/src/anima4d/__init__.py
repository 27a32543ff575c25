"""Animate a reference image into a dynamic 3D scene.

A spatio-temporal radiance field (multi-scale feature grids with a time axis)
is optimized in three stages: static reconstruction of the reference image,
coarse dynamic optimization driven by pixel-gradient guidance providers, and a
semantic refinement stage conditioned on the coarse result. Guidance is a
pluggable contract; the built-in providers are analytic and run offline.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataFormatError,
    InvalidInputError,
    ProtocolError,
    RetryableTransportError,
)

__all__ = [
    "ConfigError",
    "DataFormatError",
    "InvalidInputError",
    "ProtocolError",
    "RetryableTransportError",
    "__version__",
]
