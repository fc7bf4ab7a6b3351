"""Pixel-wise moment rendering for voxel radiance fields and Gaussian splats."""

from ._backend import backend_name, set_threads
from .core import Camera, MomentImage, Pose, Ray, RenderResult, look_at
from .termination import (MomentPrecisionError, TerminationDistribution, central_moment,
                          raw_moment, variance, weights_from_alphas)

__version__ = "0.1.0"

__all__ = [
    "Camera", "MomentImage", "MomentPrecisionError", "Pose", "Ray", "RenderResult",
    "TerminationDistribution", "backend_name", "central_moment", "look_at", "raw_moment",
    "set_threads", "variance", "weights_from_alphas",
]
