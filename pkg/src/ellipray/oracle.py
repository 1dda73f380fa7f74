"""Independent ground truth: pointwise field evaluation and dense quadrature.

This module deliberately avoids the event/segment machinery. The radiance
field is evaluated pointwise (membership tests against every ellipsoid) and
integrated by a uniform midpoint rule with the per-step alpha form, which
converges with O(1/n) error caused purely by steps straddling primitive
boundaries. It is the slow reference the fast renderer is checked against.
Always runs in float64.
"""

import numpy as np

from .bvh import all_pairs
from .geometry import Ray
from .renderer import build_events, composite_ray
from .scene import Scene, SceneArrays, eval_color, sigma_from_alpha

SPAN_EPS = 1e-9
_CHUNK = 1 << 14


def field_at(scene: Scene, x, view_dir=None):
    """Density and density-weighted color of the field at a point.

    Returns (sigma, rgb). The color is the sigma-weighted average of the
    containing primitives' colors, or black where the density is zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if view_dir is None:
        view_dir = np.array([0.0, 0.0, 1.0])
    sigma_total = 0.0
    premul = np.zeros(3)
    for prim in scene.primitives:
        local = (prim.rotation_matrix().T @ (x - prim.mean)) / prim.scale
        if float(local @ local) <= 1.0:
            s = sigma_from_alpha(prim.alpha, prim.scale)
            sigma_total += s
            premul += s * eval_color(prim, view_dir, scene.sh_degree_active)
    if sigma_total > 0.0:
        return sigma_total, premul / sigma_total
    return 0.0, np.zeros(3)


def _field_batch(arrays: SceneArrays, points: np.ndarray, colors_prim: np.ndarray):
    """Vectorized field evaluation at (M, 3) points for fixed view direction."""
    local = np.einsum("pji,mpj->mpi", arrays.rotations, points[:, None, :] - arrays.means[None])
    local /= arrays.scales[None]
    inside = np.einsum("mpi,mpi->mp", local, local) <= 1.0
    sig = np.where(inside, arrays.sigmas[None, :], 0.0)
    sigma_total = sig.sum(axis=1)
    premul = np.einsum("mp,pc->mc", sig, colors_prim)
    return sigma_total, premul


def quadrature_render(scene: Scene, ray: Ray, n_steps: int):
    """Integrate the rendering integral by uniform midpoint steps.

    The integration span covers [first event - eps, last event + eps]; the
    field is zero elsewhere so nothing outside contributes. Background is
    composited behind the remaining transmittance.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    pairs = all_pairs(scene, ray)
    if not pairs:
        return scene.background.copy()
    t0 = min(p.t_enter for p in pairs) - SPAN_EPS
    t1 = max(p.t_exit for p in pairs) + SPAN_EPS
    arrays = SceneArrays.from_scene(scene)
    from . import sh as _sh

    basis = _sh.sh_basis(arrays.sh_degree_active, ray.direction)
    colors_prim = _sh.softplus(
        np.einsum("b,pbc->pc", basis, arrays.sh_coeffs[:, : basis.shape[0]])
    )

    dt = (t1 - t0) / n_steps
    T = 1.0
    color = np.zeros(3)
    for start in range(0, n_steps, _CHUNK):
        stop = min(start + _CHUNK, n_steps)
        mids = t0 + (np.arange(start, stop, dtype=np.float64) + 0.5) * dt
        points = ray.origin[None, :] + mids[:, None] * ray.direction[None, :]
        sigma, premul = _field_batch(arrays, points, colors_prim)
        optical = sigma * dt
        seg_alpha = -np.expm1(-optical)
        trans = np.exp(-np.cumsum(optical))
        trans_before = np.concatenate([[1.0], trans[:-1]]) * T
        safe = np.where(sigma > 0, sigma, 1.0)
        seg_color = premul / safe[:, None]
        color += np.einsum("m,mc->c", trans_before * seg_alpha, seg_color)
        T *= trans[-1] if len(trans) else 1.0
    return color + T * scene.background


def bruteforce_render(scene: Scene, ray: Ray, t_stop: float = 0.0):
    """BVH-free cross-check: intersect every primitive, then the normal event pipeline."""
    pairs = all_pairs(scene, ray)
    events = build_events(pairs, scene, ray.direction)
    color, _ = composite_ray(events, scene.background, t_stop)
    return color
