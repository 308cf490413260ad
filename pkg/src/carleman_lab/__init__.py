"""Numerical laboratory for null-cone Carleman estimates, observability and HUM control of waves."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402

__all__ = ["BACKEND", "__version__"]
