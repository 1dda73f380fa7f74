"""Exact volume rendering of constant-density ellipsoid primitives.

A radiance field is represented as a set of ellipsoids with constant
density and view-dependent color. Rays intersect each primitive twice;
sorting the entry/exit events and tracking running density and
premultiplied-color sums gives a closed-form, order-independent composite.
The package adds adjoint gradients, a density-aware adaptive density
control loop, an independent quadrature oracle, and a CLI for rendering,
analysis, and training.
"""

__version__ = "0.1.0"

from .geometry import CameraModel, HitPair, Ray
from .renderer import RenderSettings, render_image
from .scene import (
    EllipsoidPrimitive,
    Scene,
    eval_color,
    sigma_from_alpha,
    validate_scene,
)

__all__ = [
    "CameraModel",
    "EllipsoidPrimitive",
    "HitPair",
    "Ray",
    "RenderSettings",
    "Scene",
    "eval_color",
    "render_image",
    "sigma_from_alpha",
    "validate_scene",
    "__version__",
]
