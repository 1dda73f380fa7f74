"""Scene contraction, its inverse, and contracted-space primitive seeding.

The contraction maps Euclidean space into a radius-2 ball:

    C(x)    = x * (2 sqrt(max(1, ||x||^2)) - 1) / max(1, ||x||^2)
    C^-1(z) = z / (sqrt(max(1, ||z||^2)) * (2 - min(2, sqrt(max(1, ||z||^2)))))

Both are the identity inside the unit ball. Seeding samples primitive
centers uniformly in the contracted radius-2 ball, maps them out through
C^-1, and sizes them isotropically from the sphere-packing radius scaled by
the local Jacobian volume change.
"""

import math

import numpy as np

from . import sh
from .scene import ALPHA_MAX, EllipsoidPrimitive

# Densest sphere packing fraction (face-centered cubic).
PACKING_FRACTION = math.pi / math.sqrt(18.0)


def contract(x: np.ndarray) -> np.ndarray:
    """Map Euclidean points into the radius-2 ball; identity inside radius 1."""
    x = np.asarray(x, dtype=np.float64)
    n2 = np.maximum(np.sum(x * x, axis=-1, keepdims=True), 1.0)
    n = np.sqrt(n2)
    return x * (2.0 * n - 1.0) / n2


def uncontract(z: np.ndarray) -> np.ndarray:
    """Inverse contraction; valid for ||z|| < 2."""
    z = np.asarray(z, dtype=np.float64)
    n = np.sqrt(np.maximum(np.sum(z * z, axis=-1, keepdims=True), 1.0))
    return z / (n * (2.0 - np.minimum(n, 2.0)))


def contract_jacobian(x: np.ndarray) -> np.ndarray:
    """Jacobian of the contraction at a single Euclidean point, (3, 3)."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    n = np.linalg.norm(x)
    if n <= 1.0:
        return np.eye(3)
    g = (2.0 * n - 1.0) / (n * n)
    gprime = (2.0 - 2.0 * n) / (n * n * n)
    xhat = x / n
    return g * np.eye(3) + gprime * np.outer(x, xhat)


def seed_inverse_contraction(
    n: int,
    bounds_center=(0.0, 0.0, 0.0),
    bounds_radius: float = 1.0,
    alpha: float = 0.1,
    color: float = 0.5,
    sh_degree: int = 1,
    rng=None,
) -> list:
    """Seed primitives by uncontracting uniform samples from the radius-2 ball.

    The world region of interest, a ball at bounds_center with
    bounds_radius, maps to the contracted unit ball. Each seed gets the
    sphere-packing radius for n spheres in the radius-2 ball, scaled
    isotropically by the local inverse-contraction Jacobian (linearized,
    applied to the covariance, then isotropized to its volume-preserving
    equivalent) and by bounds_radius back into world units.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = rng or np.random.default_rng(0)
    bounds_center = np.asarray(bounds_center, dtype=np.float64)
    # Radius of n equal spheres at the densest packing inside a radius-2 ball.
    seed_radius = 2.0 * (PACKING_FRACTION / max(n, 1)) ** (1.0 / 3.0)
    # Constant color through the softplus activation.
    c0 = sh.softplus_inverse(color) / sh.SH_C0
    coeffs = np.zeros((sh.n_coeffs(sh_degree), 3))
    coeffs[0, :] = c0

    prims = []
    while len(prims) < n:
        z = rng.uniform(-2.0, 2.0, size=(max(n - len(prims), 1) * 2, 3))
        z = z[np.sum(z * z, axis=1) < 4.0]
        for zk in z:
            if len(prims) == n:
                break
            x = uncontract(zk)
            jac = contract_jacobian(x)  # forward Jacobian at the seed
            # Covariance through the linearized inverse: J^-1 S J^-T with
            # S = r^2 I, then isotropized to equal volume.
            det = abs(np.linalg.det(jac))
            iso = seed_radius * det ** (-1.0 / 3.0)
            prims.append(
                EllipsoidPrimitive(
                    mean=bounds_center + x * bounds_radius,
                    rotation=(1.0, 0.0, 0.0, 0.0),
                    scale=np.full(3, iso * bounds_radius),
                    alpha=min(alpha, ALPHA_MAX),
                    sh_coeffs=coeffs.copy(),
                )
            )
    return prims
