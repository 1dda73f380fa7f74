"""Ablation renderers: globally sorted splatting and per-ray no-mixing.

Both reuse the exact ray-ellipsoid chords (alpha = 1 - exp(-sigma * chord))
so the comparison isolates blend order and interval mixing. The splatted
mode sorts primitives once per frame by camera-space depth of their means
and alpha-composites in that fixed order, ignoring overlap; it is
discontinuous whenever the depth order of two overlapping primitives
flips. The no-mixing mode sorts per ray by entry distance, which removes
the frame-level popping but still ignores overlap, biasing colors wherever
primitives interpenetrate.
"""

import numpy as np

from . import sh
from .geometry import CameraModel, generate_rays, intersect_batch
from .renderer import RenderSettings
from .scene import Scene, SceneArrays

SPLATTED = "splatted"
NO_MIXING = "nomix"


def composite_in_order(arrays, origins, dirs, order, t_stop=0.0):
    """Front-to-back alpha compositing of whole-primitive chords.

    order is (N, P) giving, per ray, the primitive visit order.
    """
    n = origins.shape[0]
    p = arrays.count
    bg = arrays.background
    if p == 0:
        return np.broadcast_to(bg, (n, 3)).copy(), np.ones(n)
    basis = sh.sh_basis(arrays.sh_degree_active, dirs)
    nb = basis.shape[1]
    colors_prim = sh.softplus(np.einsum("nb,pbc->npc", basis, arrays.sh_coeffs[:, :nb]))
    te, tx, valid, _, _, _, _ = intersect_batch(origins, dirs, arrays)
    chord = np.where(valid, tx - te, 0.0)
    alpha = -np.expm1(-arrays.sigmas[None, :] * chord)

    alpha_o = np.take_along_axis(alpha, order, axis=1)
    colors_o = np.take_along_axis(colors_prim, order[:, :, None], axis=1)

    T = np.ones(n)
    out = np.zeros((n, 3))
    active = np.ones(n, dtype=bool)
    for j in range(p):
        a = np.where(active, alpha_o[:, j], 0.0)
        out += (T * a)[:, None] * colors_o[:, j]
        T = T * (1.0 - a)
        if t_stop > 0.0:
            active &= T >= t_stop
    out += T[:, None] * bg
    return out, T


def splat_order(arrays: SceneArrays, camera: CameraModel) -> np.ndarray:
    """Global front-to-back order by camera-space depth of primitive means."""
    depth = (arrays.means - camera.position[None, :]) @ camera.forward
    return np.argsort(depth, kind="stable")


def render_rows_baseline(scene, camera, rows, settings: RenderSettings, mode: str):
    arrays = SceneArrays.from_scene(scene)
    rows = list(rows)
    out = np.zeros((len(rows), camera.width, 3))
    if mode == SPLATTED:
        frame_order = splat_order(arrays, camera)
    for i, row in enumerate(rows):
        n = camera.width
        px = np.arange(n, dtype=np.float64)
        py = np.full(n, float(row))
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(entropy=settings.seed, spawn_key=(int(row),)))
        )
        accum = np.zeros((n, 3))
        for _ in range(settings.spp):
            if settings.jitter:
                off = rng.random((n, 2))
            else:
                off = np.full((n, 2), 0.5)
            origins, dirs = generate_rays(camera, px + off[:, 0], py + off[:, 1])
            if mode == SPLATTED:
                order = np.broadcast_to(frame_order, (n, arrays.count)).copy()
            elif mode == NO_MIXING:
                te, _, valid, _, _, _, _ = intersect_batch(origins, dirs, arrays)
                order = np.argsort(np.where(valid, te, np.inf), axis=1, kind="stable")
            else:
                raise ValueError(f"unknown baseline mode {mode!r}")
            colors, _ = composite_in_order(arrays, origins, dirs, order, settings.t_stop)
            accum += colors
        out[i] = accum / settings.spp
    return out


def render_splatted(scene: Scene, camera: CameraModel, settings: RenderSettings | None = None):
    """Render with one global depth sort of primitive means per frame."""
    settings = settings or RenderSettings(jitter=False)
    return render_rows_baseline(scene, camera, range(camera.height), settings, SPLATTED)


def render_no_mixing(scene: Scene, camera: CameraModel, settings: RenderSettings | None = None):
    """Render with per-ray entry-distance sorting but no interval mixing."""
    settings = settings or RenderSettings(jitter=False)
    return render_rows_baseline(scene, camera, range(camera.height), settings, NO_MIXING)
