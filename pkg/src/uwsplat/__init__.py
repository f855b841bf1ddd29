"""Differentiable CPU Gaussian splatting with per-primitive underwater medium parameters."""

from . import _threads  # noqa: F401  (must precede any numba import)
from .scene import Camera, GaussianCloud, RenderOutput, SceneBundle

__all__ = ["Camera", "GaussianCloud", "RenderOutput", "SceneBundle"]
__version__ = "0.1.0"
