"""Distributed gradient flow, penalized flows and time-dependent stable manifolds."""
from .kernels import BACKEND  # noqa: F401

__version__ = "0.1.0"
