"""Ellipsoid primitives, the density/color parameterization, and scene validation.

Each primitive is a constant-density ellipsoid: position, unit rotation
quaternion (w, x, y, z), per-axis semi-axis lengths, an opacity parameter
alpha in [0, 1), and per-channel spherical-harmonic color coefficients.
The opacity parameter maps to the density used during rendering as

    sigma(alpha) = -log(1 - 0.99 * alpha) / min(s_x, s_y, s_z)

so that the accumulated opacity over one shortest semi-axis equals
0.99 * alpha regardless of the primitive's size.
"""

from dataclasses import dataclass, field

import numpy as np

from . import sh
from .errors import ParameterDomainError

ALPHA_SCALE = 0.99
ALPHA_MAX = 0.9999
DEFAULT_MAX_PRIMITIVE_SIZE = 25.0
QUAT_NORM_TOL = 1e-9


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quats_to_matrices(quats: np.ndarray) -> np.ndarray:
    """Batched quat_to_matrix: (P, 4) -> (P, 3, 3)."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    R = np.empty((quats.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_matrix_derivatives(q: np.ndarray) -> np.ndarray:
    """dR/dq for the unit-quaternion rotation formula, shape (4, 3, 3).

    Valid on the unit sphere; gradients taken through it must be projected
    onto the tangent space of the quaternion before use.
    """
    w, x, y, z = q
    dRw = 2.0 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    dRx = 2.0 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=np.float64)
    dRy = 2.0 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=np.float64)
    dRz = 2.0 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=np.float64)
    return np.stack([dRw, dRx, dRy, dRz])


@dataclass
class EllipsoidPrimitive:
    """A constant-density ellipsoid primitive."""

    mean: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    scale: np.ndarray  # semi-axis lengths, > 0
    alpha: float
    sh_coeffs: np.ndarray  # ((L+1)**2, 3) pre-activation

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.alpha = float(self.alpha)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(-1, 3)

    @property
    def max_degree(self) -> int:
        return int(np.sqrt(self.sh_coeffs.shape[0])) - 1

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def renormalized(self) -> "EllipsoidPrimitive":
        return EllipsoidPrimitive(
            self.mean.copy(),
            quat_normalize(self.rotation),
            self.scale.copy(),
            self.alpha,
            self.sh_coeffs.copy(),
        )

    def copy(self) -> "EllipsoidPrimitive":
        return EllipsoidPrimitive(
            self.mean.copy(),
            self.rotation.copy(),
            self.scale.copy(),
            self.alpha,
            self.sh_coeffs.copy(),
        )


@dataclass
class Scene:
    """A renderable collection of primitives with a background color.

    Immutable during rendering; mutation happens only between optimizer
    steps by a single writer.
    """

    primitives: list = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sh_degree_active: int = 0

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        self.sh_degree_active = int(self.sh_degree_active)

    def __len__(self):
        return len(self.primitives)

    def copy(self) -> "Scene":
        return Scene(
            [p.copy() for p in self.primitives],
            self.background.copy(),
            self.sh_degree_active,
        )


def sigma_from_alpha(alpha: float, scale) -> float:
    """Map the opacity parameter to the rendering density, 1/world-unit."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise ParameterDomainError(f"scale components must be positive, got {scale}")
    inner = 1.0 - ALPHA_SCALE * alpha
    if alpha < 0 or inner <= 0:
        raise ParameterDomainError(f"alpha {alpha} outside [0, 1/{ALPHA_SCALE})")
    return -np.log(inner) / float(np.min(scale)) + 0.0


def alpha_from_sigma(sigma: float, scale) -> float:
    """Inverse of sigma_from_alpha for ADC density adjustments, clamped to the valid range."""
    scale = np.asarray(scale, dtype=np.float64)
    alpha = -np.expm1(-sigma * float(np.min(scale))) / ALPHA_SCALE
    return float(np.clip(alpha, 0.0, ALPHA_MAX))


def sigmas_from_alphas(alphas: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Batched sigma_from_alpha for (P,) alphas and (P, 3) scales."""
    inner = 1.0 - ALPHA_SCALE * alphas
    if np.any(inner <= 0) or np.any(alphas < 0):
        raise ParameterDomainError("alpha outside [0, 1/0.99)")
    return -np.log(inner) / np.min(scales, axis=1) + 0.0


def eval_color(primitive: EllipsoidPrimitive, view_dir, sh_degree_active: int) -> np.ndarray:
    """View-dependent color: SH expansion followed by softplus (beta=10).

    view_dir must be unit within 1e-6. Output is strictly positive RGB.
    """
    view_dir = np.asarray(view_dir, dtype=np.float64)
    if abs(np.linalg.norm(view_dir) - 1.0) > 1e-6:
        raise ValueError("view_dir must be a unit vector")
    degree = min(sh_degree_active, primitive.max_degree)
    basis = sh.sh_basis(degree, view_dir)
    raw = basis @ primitive.sh_coeffs[: basis.shape[0]]
    return sh.softplus(raw)


@dataclass
class SceneArrays:
    """Structure-of-arrays view of a scene for the vectorized engines."""

    means: np.ndarray  # (P, 3)
    quats: np.ndarray  # (P, 4)
    rotations: np.ndarray  # (P, 3, 3)
    scales: np.ndarray  # (P, 3)
    alphas: np.ndarray  # (P,)
    sigmas: np.ndarray  # (P,)
    sh_coeffs: np.ndarray  # (P, B, 3)
    background: np.ndarray  # (3,)
    sh_degree_active: int

    @classmethod
    def from_scene(cls, scene: Scene) -> "SceneArrays":
        n = len(scene.primitives)
        if n == 0:
            return cls(
                means=np.zeros((0, 3)),
                quats=np.zeros((0, 4)),
                rotations=np.zeros((0, 3, 3)),
                scales=np.ones((0, 3)),
                alphas=np.zeros(0),
                sigmas=np.zeros(0),
                sh_coeffs=np.zeros((0, 1, 3)),
                background=scene.background.copy(),
                sh_degree_active=scene.sh_degree_active,
            )
        max_b = max(p.sh_coeffs.shape[0] for p in scene.primitives)
        sh_coeffs = np.zeros((n, max_b, 3))
        for i, p in enumerate(scene.primitives):
            sh_coeffs[i, : p.sh_coeffs.shape[0]] = p.sh_coeffs
        means = np.stack([p.mean for p in scene.primitives])
        quats = np.stack([p.rotation for p in scene.primitives])
        scales = np.stack([p.scale for p in scene.primitives])
        alphas = np.array([p.alpha for p in scene.primitives])
        return cls(
            means=means,
            quats=quats,
            rotations=quats_to_matrices(quats),
            scales=scales,
            alphas=alphas,
            sigmas=sigmas_from_alphas(alphas, scales),
            sh_coeffs=sh_coeffs,
            background=scene.background.copy(),
            sh_degree_active=min(scene.sh_degree_active, int(np.sqrt(max_b)) - 1),
        )

    @property
    def count(self) -> int:
        return self.means.shape[0]

    def astype(self, dtype) -> "SceneArrays":
        """Cast all numeric fields; float32 feeds the training hot path."""
        return SceneArrays(
            means=self.means.astype(dtype),
            quats=self.quats.astype(dtype),
            rotations=self.rotations.astype(dtype),
            scales=self.scales.astype(dtype),
            alphas=self.alphas.astype(dtype),
            sigmas=self.sigmas.astype(dtype),
            sh_coeffs=self.sh_coeffs.astype(dtype),
            background=self.background.astype(dtype),
            sh_degree_active=self.sh_degree_active,
        )

    def to_scene(self) -> Scene:
        prims = [
            EllipsoidPrimitive(
                self.means[i], self.quats[i], self.scales[i], self.alphas[i], self.sh_coeffs[i]
            )
            for i in range(self.count)
        ]
        return Scene(prims, self.background, self.sh_degree_active)


@dataclass
class Violation:
    """One invariant violation found by validate_scene."""

    index: int | None  # primitive index, or None for scene-level problems
    field: str
    message: str

    def __str__(self):
        where = "scene" if self.index is None else f"primitive {self.index}"
        return f"{where}: {self.field}: {self.message}"


def validate_scene(
    scene: Scene,
    max_primitive_size: float = DEFAULT_MAX_PRIMITIVE_SIZE,
    renormalize: bool = False,
) -> list:
    """Check every scene invariant; returns a list of violations (empty if ok).

    With renormalize=True, off-unit quaternions are silently renormalized
    in place instead of reported.
    """
    violations = []
    bg = scene.background
    if not np.all(np.isfinite(bg)) or np.any(bg < 0) or np.any(bg > 1):
        violations.append(Violation(None, "background", f"components must be in [0, 1], got {bg}"))
    for i, p in enumerate(scene.primitives):
        if not np.all(np.isfinite(p.mean)):
            violations.append(Violation(i, "mean", "non-finite component"))
        qn = np.linalg.norm(p.rotation)
        if abs(qn - 1.0) > QUAT_NORM_TOL:
            if renormalize and qn > 0 and np.all(np.isfinite(p.rotation)):
                p.rotation = p.rotation / qn
            else:
                violations.append(Violation(i, "rotation", f"quaternion norm {qn:.6g} != 1"))
        if np.any(p.scale <= 0) or not np.all(np.isfinite(p.scale)):
            violations.append(Violation(i, "scale", f"components must be positive, got {p.scale}"))
        elif np.any(p.scale > max_primitive_size):
            violations.append(
                Violation(i, "scale", f"component exceeds max size {max_primitive_size}")
            )
        if not (0.0 <= p.alpha <= ALPHA_MAX):
            violations.append(Violation(i, "alpha", f"{p.alpha} outside [0, {ALPHA_MAX}]"))
        if not np.all(np.isfinite(p.sh_coeffs)):
            violations.append(Violation(i, "sh_coeffs", "non-finite coefficient"))
        if p.max_degree < scene.sh_degree_active and p.sh_coeffs.shape[0] != sh.n_coeffs(p.max_degree):
            violations.append(
                Violation(i, "sh_coeffs", f"count {p.sh_coeffs.shape[0]} is not a square number")
            )
    max_deg = min((p.max_degree for p in scene.primitives), default=sh.MAX_DEGREE)
    if scene.primitives and scene.sh_degree_active > max_deg:
        violations.append(
            Violation(
                None,
                "sh_degree_active",
                f"{scene.sh_degree_active} exceeds stored coefficient degree {max_deg}",
            )
        )
    return violations
