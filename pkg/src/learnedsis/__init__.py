"""Sequential importance sampling with a learned Gaussian proposal."""

from .kernels import BACKEND

__version__ = "0.1.0"
