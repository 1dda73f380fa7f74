"""Bundled demo scenes and the synthetic training dataset generator.

The flatland pair is the popping testbed: two heavily overlapping
ellipsoids (one red, one blue) watched by a camera orbiting in their
plane. Near the orbit angle where the two means are equally deep, a
global depth sort flips and splat-style compositing jumps, while the
exact renderer stays smooth and blends the overlap into purple.
"""

import math

import numpy as np

from . import sh
from .geometry import CameraModel
from .renderer import RenderSettings, render_image
from .scene import EllipsoidPrimitive, Scene


def _solid_color_coeffs(rgb, degree: int = 0) -> np.ndarray:
    """SH coefficients whose softplus-activated degree-0 term equals rgb."""
    coeffs = np.zeros((sh.n_coeffs(degree), 3))
    coeffs[0] = sh.softplus_inverse(np.asarray(rgb, dtype=np.float64)) / sh.SH_C0
    return coeffs


def make_flatland_scene(separation: float = 0.6, radius: float = 0.8, alpha: float = 0.62) -> Scene:
    """Two overlapping primitives, red and blue, centered on the x axis."""
    red = EllipsoidPrimitive(
        mean=(-separation / 2.0, 0.0, 0.0),
        rotation=(1.0, 0.0, 0.0, 0.0),
        scale=(radius, radius, radius),
        alpha=alpha,
        sh_coeffs=_solid_color_coeffs((0.85, 0.08, 0.08)),
    )
    blue = EllipsoidPrimitive(
        mean=(separation / 2.0, 0.0, 0.0),
        rotation=(1.0, 0.0, 0.0, 0.0),
        scale=(radius, radius, radius),
        alpha=alpha,
        sh_coeffs=_solid_color_coeffs((0.08, 0.08, 0.85)),
    )
    return Scene([red, blue], background=(0.0, 0.0, 0.0), sh_degree_active=0)


def make_overlap_demo_scene() -> Scene:
    """The two-primitive overlap configuration used in the documentation."""
    alpha_for_sigma_one = (1.0 - math.exp(-1.0)) / 0.99  # unit sphere, density 1
    a = EllipsoidPrimitive(
        mean=(0.0, 0.0, 1.0),
        rotation=(1.0, 0.0, 0.0, 0.0),
        scale=(1.0, 1.0, 1.0),
        alpha=alpha_for_sigma_one,
        sh_coeffs=_solid_color_coeffs((0.9, 0.1, 0.1)),
    )
    b = EllipsoidPrimitive(
        mean=(0.0, 0.0, 2.0),
        rotation=(1.0, 0.0, 0.0, 0.0),
        scale=(1.0, 1.0, 1.0),
        alpha=alpha_for_sigma_one,
        sh_coeffs=_solid_color_coeffs((0.1, 0.1, 0.9)),
    )
    return Scene([a, b], background=(0.0, 0.0, 0.0), sh_degree_active=0)


def orbit_camera(
    center,
    radius: float,
    angle: float,
    width: int = 128,
    height: int = 9,
    fov_x: float = math.radians(18.0),
    up=(0.0, 0.0, 1.0),
) -> CameraModel:
    """Camera on a circular orbit in the plane perpendicular to `up`, looking at center."""
    center = np.asarray(center, dtype=np.float64)
    position = center + radius * np.array([math.cos(angle), math.sin(angle), 0.0])
    return CameraModel.look_at(
        position, center, up=up, width=width, height=height, fov_x=fov_x
    )


def make_random_scene(
    n_primitives: int,
    seed: int,
    sh_degree: int = 1,
    alpha_range=(0.1, 0.85),
    scale_range=(0.15, 0.6),
    spread: float = 1.2,
    overlap_fraction: float = 0.5,
    background=(0.0, 0.0, 0.0),
) -> Scene:
    """Random scene with a forced fraction of overlapping primitive pairs."""
    rng = np.random.default_rng(seed)
    prims = []
    while len(prims) < n_primitives:
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        scale = rng.uniform(*scale_range, size=3)
        if prims and rng.random() < overlap_fraction:
            partner = prims[rng.integers(len(prims))]
            mean = partner.mean + rng.uniform(-0.5, 0.5, 3) * partner.scale
        else:
            mean = rng.uniform(-spread, spread, 3)
        coeffs = np.zeros((sh.n_coeffs(sh_degree), 3))
        coeffs[0] = sh.softplus_inverse(rng.uniform(0.15, 0.85, 3)) / sh.SH_C0
        if sh_degree > 0:
            coeffs[1:] = rng.normal(0.0, 0.25, (sh.n_coeffs(sh_degree) - 1, 3))
        prims.append(
            EllipsoidPrimitive(mean, q, scale, rng.uniform(*alpha_range), coeffs)
        )
    return Scene(prims, background, sh_degree)


def sphere_cameras(
    n: int,
    center,
    radius: float,
    width: int,
    height: int,
    fov_x: float = math.radians(50.0),
    seed: int = 0,
) -> list:
    """Cameras on a Fibonacci sphere around the scene, all looking at center."""
    center = np.asarray(center, dtype=np.float64)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    cams = []
    for i in range(n):
        z = 1.0 - 2.0 * (i + 0.5) / n
        z *= 0.8  # avoid singular poles where the fixed up-vector degenerates
        r = math.sqrt(max(1.0 - z * z, 0.0))
        theta = golden * i
        pos = center + radius * np.array([r * math.cos(theta), r * math.sin(theta), z])
        cams.append(
            CameraModel.look_at(pos, center, width=width, height=height, fov_x=fov_x)
        )
    return cams


def build_synthetic_dataset(
    n_primitives: int = 32,
    n_train: int = 24,
    n_test: int = 4,
    resolution: int = 128,
    seed: int = 0,
    camera_radius: float = 4.0,
    background=(0.04, 0.04, 0.07),
):
    """Ground-truth scene plus posed renders for the desk-scale training run.

    Returns (scene, cameras, images, splits); every n_train/(n_test)-th view
    is held out. Ground truth is rendered by the exact engine without
    jitter so evaluation against it is noise free.
    """
    scene = make_random_scene(
        n_primitives,
        seed=seed,
        sh_degree=1,
        alpha_range=(0.25, 0.85),
        scale_range=(0.18, 0.5),
        spread=1.1,
        background=background,
    )
    total = n_train + n_test
    cams = sphere_cameras(total, (0.0, 0.0, 0.0), camera_radius, resolution, resolution, seed=seed)
    stride = max(total // max(n_test, 1), 1)
    splits = ["train"] * total
    marked = 0
    for i in range(total):
        if i % stride == stride - 1 and marked < n_test:
            splits[i] = "test"
            marked += 1
    settings = RenderSettings(spp=1, jitter=False, t_stop=0.0, seed=seed)
    images = [render_image(scene, cam, settings) for cam in cams]
    return scene, cams, images, splits


def desk_train_config(**overrides):
    """Training recipe calibrated for the bundled 32-primitive dataset.

    The positional learning rate, its decay, and the density-control
    thresholds are re-tuned for this scale: the world-space gradient
    statistic here sits around 1e-5..1e-4, far from the defaults tuned for
    full photogrammetric scenes, and a short run cannot afford wholesale
    splitting of near-converged primitives, so the control pass is tuned
    to clean up dead primitives.
    """
    from .training import TrainConfig

    base = dict(
        max_steps=2600,
        lr_position_init=4e-4,
        lr_position_final=1e-6,
        lr_sh=0.005,
        lr_final_scale=0.005,
        lambda_aniso=0.0,
        densify_start=600,
        densify_interval=200,
        densify_stop_step=1001,
        split_grad_threshold=5e-3,
        sh_degree_interval=400,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def perturbed_init(scene: Scene, seed: int, mean_noise: float = 0.04,
                   alpha_noise: float = 0.06, scale_jitter: float = 0.08,
                   sh_noise: float = 0.05, quat_noise: float = 0.03,
                   n_ghost: int = 3) -> Scene:
    """Perturbed copy of a ground-truth scene used as the training start.

    Adds n_ghost nearly transparent extras (below the prune threshold) so
    the first density-control pass has something to remove.
    """
    rng = np.random.default_rng(seed)
    out = scene.copy()
    for p in out.primitives:
        p.mean = p.mean + rng.normal(0.0, mean_noise, 3)
        p.alpha = float(np.clip(p.alpha + rng.normal(0.0, alpha_noise), 0.05, 0.95))
        p.scale = p.scale * np.exp(rng.normal(0.0, scale_jitter, 3))
        q = p.rotation + rng.normal(0.0, quat_noise, 4)
        p.rotation = q / np.linalg.norm(q)
        p.sh_coeffs = p.sh_coeffs + rng.normal(0.0, sh_noise, p.sh_coeffs.shape)
    for _ in range(n_ghost):
        out.primitives.append(
            EllipsoidPrimitive(
                rng.uniform(-1.0, 1.0, 3),
                (1.0, 0.0, 0.0, 0.0),
                rng.uniform(0.2, 0.4, 3),
                0.003,
                np.zeros_like(scene.primitives[0].sh_coeffs),
            )
        )
    out.sh_degree_active = 0
    return out
