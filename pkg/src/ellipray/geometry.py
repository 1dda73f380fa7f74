"""Rays, camera models, ray-ellipsoid intersection, and bounding boxes.

The intersection transforms the ray into the primitive frame (translate by
-mean, rotate by the conjugate quaternion, divide per-axis by scale) and
intersects the unit sphere using the numerically stable quadratic
formulation q = -(b/2) - sign(b) * sqrt(disc), t1 = q/a, t2 = c/q, which
avoids catastrophic cancellation when the roots have very different
magnitudes. The ray parameter t is preserved by the frame change, so both
roots are world-space distances along the original ray.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import CameraDomainError
from .scene import EllipsoidPrimitive, SceneArrays, quat_matrix_derivatives

# Tangency cutoff on the quarter discriminant in the unit-sphere frame.
# Grazing hits below this produce zero-length intervals and are dropped.
TANGENCY_EPS = 1e-12

AABB_EPS = 1e-12

PINHOLE = "pinhole"
FISHEYE = "fisheye_equidistant"
THIN_LENS = "thin_lens"
CAMERA_KINDS = (PINHOLE, FISHEYE, THIN_LENS)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit
    t_min: float = 0.0
    t_max: float = math.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.t_min < self.t_max:
            raise ValueError("ray requires t_min < t_max")

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass
class HitPair:
    """Entry/exit distances of one primitive along a ray."""

    t_enter: float
    t_exit: float
    primitive_index: int


@dataclass
class CameraModel:
    """Pinhole, equidistant fisheye, or thin-lens camera.

    pose is world-from-camera: x_world = rotation @ x_cam + translation.
    Camera space looks down +z with +x right and +y down, matching the
    fx, fy, cx, cy pixel intrinsics.
    """

    kind: str
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    focal: float = 0.0  # fisheye focal length in pixels
    aperture_radius: float = 0.0  # thin lens, world units
    focus_distance: float = 1.0  # thin lens, world units

    def __post_init__(self):
        if self.kind not in CAMERA_KINDS:
            raise ValueError(f"unknown camera kind {self.kind!r}")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.width < 1 or self.height < 1:
            raise ValueError("camera resolution must be at least 1x1")
        if self.focus_distance <= 0:
            raise ValueError("focus_distance must be positive")
        if self.aperture_radius < 0:
            raise ValueError("aperture_radius must be non-negative")

    @property
    def position(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    @classmethod
    def look_at(
        cls,
        position,
        target,
        up=(0.0, 0.0, 1.0),
        kind: str = PINHOLE,
        width: int = 128,
        height: int = 128,
        fov_x: float = math.radians(50.0),
        **kwargs,
    ) -> "CameraModel":
        """Build a camera at `position` looking at `target` with the given up hint."""
        position = np.asarray(position, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - position
        fwd = fwd / np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        nr = np.linalg.norm(right)
        if nr < 1e-12:
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
            nr = np.linalg.norm(right)
        right = right / nr
        down = np.cross(fwd, right)
        rotation = np.stack([right, down, fwd], axis=1)
        fx = width / (2.0 * math.tan(fov_x / 2.0))
        defaults = dict(
            fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, focal=fx
        )
        defaults.update(kwargs)
        return cls(
            kind=kind,
            rotation=rotation,
            translation=position,
            width=width,
            height=height,
            **defaults,
        )


def _sphere_frame(primitive: EllipsoidPrimitive, origin, direction):
    R = primitive.rotation_matrix()
    o = (R.T @ (np.asarray(origin) - primitive.mean)) / primitive.scale
    d = (R.T @ np.asarray(direction)) / primitive.scale
    return o, d


def intersect_ellipsoid(ray: Ray, primitive: EllipsoidPrimitive, primitive_index: int = 0):
    """Intersect a ray with an ellipsoid; returns a HitPair or None on miss.

    The returned pair is clipped against [t_min, t_max): pairs entirely
    outside are misses, t_enter is clamped up to t_min and t_exit down to
    t_max so the interval lies inside the ray's domain.
    """
    o, d = _sphere_frame(primitive, ray.origin, ray.direction)
    a = float(d @ d)
    half_b = float(o @ d)
    c = float(o @ o) - 1.0
    disc4 = half_b * half_b - a * c
    if disc4 <= TANGENCY_EPS:
        return None
    sq = math.sqrt(disc4)
    q = -half_b - math.copysign(sq, half_b) if half_b != 0.0 else -sq
    t1 = q / a
    t2 = c / q
    t_enter, t_exit = (t1, t2) if t1 <= t2 else (t2, t1)
    if t_exit <= ray.t_min or t_enter >= ray.t_max:
        return None
    t_enter = max(t_enter, ray.t_min)
    t_exit = min(t_exit, ray.t_max)
    if t_exit <= t_enter:
        return None
    return HitPair(t_enter, t_exit, primitive_index)


def intersect_batch(
    origins: np.ndarray,
    dirs: np.ndarray,
    arrays: SceneArrays,
    t_min: float = 0.0,
    t_max: float = math.inf,
):
    """Vectorized ray-ellipsoid intersection of N rays against all P primitives.

    origins/dirs are (N, 3). Returns (t_enter (N, P), t_exit (N, P),
    valid (N, P), enter_clamped (N, P)), with t_enter clamped to t_min and
    t_exit to t_max. Invalid entries hold +inf/-inf sentinels.
    """
    # (x - mu) @ R divides out the rotation; batched matmul keeps this in BLAS.
    diff = (origins[:, None, :] - arrays.means[None, :, :]).transpose(1, 0, 2)
    o_loc = np.matmul(diff, arrays.rotations).transpose(1, 0, 2)
    o_loc /= arrays.scales[None, :, :]
    d_loc = np.matmul(np.broadcast_to(dirs, (arrays.count,) + dirs.shape), arrays.rotations)
    d_loc = d_loc.transpose(1, 0, 2) / arrays.scales[None, :, :]

    a = np.sum(d_loc * d_loc, axis=-1)
    half_b = np.sum(o_loc * d_loc, axis=-1)
    c = np.sum(o_loc * o_loc, axis=-1) - 1.0
    disc4 = half_b * half_b - a * c
    valid = disc4 > TANGENCY_EPS
    sq = np.sqrt(np.where(valid, disc4, 0.0))
    sign_b = np.where(half_b >= 0.0, 1.0, -1.0)
    q = -half_b - sign_b * sq
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = q / a
        t2 = c / q
    t1 = np.where(valid, t1, 0.0)
    t2 = np.where(valid, t2, 0.0)
    t_enter_raw = np.minimum(t1, t2)
    t_exit_raw = np.maximum(t1, t2)
    valid &= (t_exit_raw > t_min) & (t_enter_raw < t_max)
    enter_clamped = valid & (t_enter_raw < t_min)
    exit_clamped = valid & (t_exit_raw > t_max)
    t_enter = np.where(valid, np.maximum(t_enter_raw, t_min), np.inf)
    t_exit = np.where(valid, np.minimum(t_exit_raw, t_max), -np.inf)
    valid &= t_exit > t_enter
    t_enter = np.where(valid, t_enter, np.inf)
    t_exit = np.where(valid, t_exit, -np.inf)
    return t_enter, t_exit, valid, enter_clamped, exit_clamped, o_loc, d_loc


def intersect_t_derivatives(ray: Ray, primitive: EllipsoidPrimitive, t: float):
    """Derivatives of one intersection root t with respect to (mean, scale, quat).

    Implicit differentiation of phi(t) = ||diag(1/s) R^T (o + t d - mu)||^2 - 1
    at the root. The quaternion component is the raw gradient of the
    unit-quaternion rotation formula; project it onto the tangent space at
    the stored quaternion before use.
    """
    R = primitive.rotation_matrix()
    s = primitive.scale
    x = ray.at(t)
    v = x - primitive.mean
    w = (R.T @ v) / s  # sphere-frame point on the surface
    d_loc = (R.T @ ray.direction) / s
    denom = 2.0 * float(w @ d_loc)  # dphi/dt
    if denom == 0.0:
        zeros = np.zeros
        return {"mean": zeros(3), "scale": zeros(3), "quat": zeros(4)}
    ws = w / s
    dphi_dmean = -2.0 * (R @ ws)
    dphi_dscale = -2.0 * w * w / s
    dR = quat_matrix_derivatives(primitive.rotation)
    dphi_dquat = 2.0 * np.einsum("i,kij,j->k", v, dR, ws)
    return {
        "mean": -dphi_dmean / denom,
        "scale": -dphi_dscale / denom,
        "quat": -dphi_dquat / denom,
    }


def aabb_of(primitive: EllipsoidPrimitive):
    """Tight axis-aligned bounding box of an ellipsoid for any rotation.

    Half extent along world axis i is the norm of row i of R @ diag(scale).
    """
    M = primitive.rotation_matrix() * primitive.scale[None, :]
    half = np.sqrt(np.sum(M * M, axis=1))
    return primitive.mean - half, primitive.mean + half


def aabbs_of_arrays(arrays: SceneArrays):
    """Batched aabb_of: returns (lo (P, 3), hi (P, 3))."""
    M = arrays.rotations * arrays.scales[:, None, :]
    half = np.sqrt(np.sum(M * M, axis=2))
    return arrays.means - half, arrays.means + half


def jitter_pixel(px_int: int, py_int: int, rng=None, enabled: bool = True):
    """Continuous pixel position: uniform in the pixel when jitter is on, else center."""
    if not enabled or rng is None:
        return px_int + 0.5, py_int + 0.5
    u, v = rng.random(2)
    return px_int + u, py_int + v


def sample_unit_disk(rng, n: int = 1) -> np.ndarray:
    """Uniform samples in the unit disk, shape (n, 2)."""
    r = np.sqrt(rng.random(n))
    theta = rng.random(n) * (2.0 * math.pi)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def _camera_dirs(camera: CameraModel, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Camera-space unit directions for continuous pixel coordinates."""
    if camera.kind == FISHEYE:
        dx = (px - camera.cx)
        dy = (py - camera.cy)
        r = np.hypot(dx, dy)
        theta = r / camera.focal
        if np.any(theta >= math.pi):
            raise CameraDomainError("fisheye angle >= pi is outside the equidistant model")
        sin_t = np.sin(theta)
        with np.errstate(invalid="ignore", divide="ignore"):
            inv_r = np.where(r > 0, 1.0 / np.where(r > 0, r, 1.0), 0.0)
        d = np.stack([sin_t * dx * inv_r, sin_t * dy * inv_r, np.cos(theta)], axis=-1)
        return d
    x = (px - camera.cx) / camera.fx
    y = (py - camera.cy) / camera.fy
    d = np.stack([x, y, np.ones_like(x)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_rays(camera: CameraModel, px: np.ndarray, py: np.ndarray, lens_samples=None):
    """Batched ray generation; px/py are continuous pixel coordinates, shape (N,).

    lens_samples (N, 2) in the unit disk applies only to thin-lens cameras.
    Returns (origins (N, 3), dirs (N, 3)).
    """
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    n = px.shape[0]
    if camera.kind == THIN_LENS:
        x = (px - camera.cx) / camera.fx
        y = (py - camera.cy) / camera.fy
        focus = np.stack([x, y, np.ones_like(x)], axis=-1) * camera.focus_distance
        if lens_samples is None or camera.aperture_radius == 0.0:
            offset = np.zeros((n, 3))
        else:
            ls = np.asarray(lens_samples, dtype=np.float64) * camera.aperture_radius
            offset = np.concatenate([ls, np.zeros((n, 1))], axis=1)
        d_cam = focus - offset
        d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
        origins = (camera.rotation @ offset.T).T + camera.translation
        dirs = (camera.rotation @ d_cam.T).T
        return origins, dirs
    d_cam = _camera_dirs(camera, px, py)
    dirs = (camera.rotation @ d_cam.T).T
    origins = np.broadcast_to(camera.translation, (n, 3)).copy()
    return origins, dirs


def generate_ray(camera: CameraModel, px: float, py: float, lens_sample=(0.0, 0.0)) -> Ray:
    """Generate the ray through one continuous pixel position."""
    if not (0.0 <= px < camera.width and 0.0 <= py < camera.height):
        raise CameraDomainError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height}")
    origins, dirs = generate_rays(
        camera, np.array([px]), np.array([py]), np.asarray(lens_sample).reshape(1, 2)
    )
    return Ray(origins[0], dirs[0])
