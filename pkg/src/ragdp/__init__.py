"""Retrieval-augmented warm starts for diffusion-policy inference."""

from ragdp._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
