"""Event decomposition, running sums, and closed-form segment compositing.

Every primitive a ray intersects contributes two events: an entry carrying
+delta_sigma and +delta_sigma*color, and an exit carrying the negated
deltas. Sorting all events by distance splits the ray into segments on
which density and premultiplied color are constant, so each segment has the
closed-form contribution c_i * (1 - exp(-sigma_i * dt_i)) attenuated by the
transmittance accumulated so far. The result is exact for any number of
overlapping primitives and invariant to the primitive order.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import batched
from .bvh import build, trace_pairs
from .geometry import CameraModel, Ray, generate_rays, intersect_ellipsoid
from .scene import Scene, SceneArrays, eval_color, sigma_from_alpha

ENTER = "enter"
EXIT = "exit"

# Debug-mode bound on how much running-density cancellation the clamp may absorb.
SIGMA_CANCEL_TOL = 1e-9


@dataclass
class RayEvent:
    t: float
    delta_sigma: float  # signed: +sigma_k on entry, -sigma_k on exit
    delta_premul: np.ndarray  # signed sigma_k * color_k
    primitive_index: int
    kind: str  # ENTER | EXIT


@dataclass
class RayState:
    """Running totals while walking a ray's events."""

    sigma_running: float = 0.0
    premul_running: np.ndarray = field(default_factory=lambda: np.zeros(3))
    transmittance: float = 1.0
    accum_color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t_prev: float = 0.0
    events_applied: int = 0


@dataclass
class RenderSettings:
    spp: int = 1
    jitter: bool = True
    t_stop: float = 1e-4
    seed: int = 0
    engine: str = "auto"  # auto | batched | perray
    threads: int = 1

    def __post_init__(self):
        if not 0.0 <= self.t_stop < 1.0:
            raise ValueError("t_stop must be in [0, 1)")
        if self.spp < 1:
            raise ValueError("spp must be at least 1")


def build_events(hit_pairs, scene: Scene, view_dir) -> list:
    """Expand hit pairs into the sorted event list for one ray.

    Ties in t break enter-before-exit, then by primitive index, making the
    walk deterministic under any primitive permutation.
    """
    events = []
    for pair in hit_pairs:
        prim = scene.primitives[pair.primitive_index]
        dsigma = sigma_from_alpha(prim.alpha, prim.scale)
        color = eval_color(prim, view_dir, scene.sh_degree_active)
        premul = dsigma * color
        events.append(RayEvent(pair.t_enter, dsigma, premul, pair.primitive_index, ENTER))
        events.append(RayEvent(pair.t_exit, -dsigma, -premul, pair.primitive_index, EXIT))
    events.sort(key=lambda e: (e.t, 0 if e.kind == ENTER else 1, e.primitive_index))
    return events


def composite_ray(events, background, t_stop: float = 0.0, state_out: RayState | None = None,
                  weights_out: dict | None = None):
    """Walk sorted events and composite the closed-form segments.

    Returns (color, final transmittance). Compositing stops early once the
    transmittance drops below t_stop; the background is blended behind
    whatever transmittance remains. Zero-length and zero-density segments
    contribute nothing.

    state_out, when given, receives the final RayState snapshot (the seed
    for adjoint replay). weights_out maps primitive_index to its
    accumulated color weight sum(T * a * dsigma_k / sigma_i).
    """
    sigma_run = 0.0
    premul = np.zeros(3)
    T = 1.0
    color = np.zeros(3)
    t_prev = events[0].t if events else 0.0
    applied = 0
    active_weights = {} if weights_out is not None else None
    for ev in events:
        dt = ev.t - t_prev
        if dt > 0.0 and sigma_run > 0.0:
            optical = sigma_run * dt
            seg_alpha = -math.expm1(-optical)
            seg_color = premul / sigma_run
            color += (T * seg_alpha) * seg_color
            if active_weights is not None:
                share = T * seg_alpha / sigma_run
                for p, dsig in active_weights.items():
                    weights_out[p] = weights_out.get(p, 0.0) + share * dsig
            T *= math.exp(-optical)
            if T < t_stop:
                break
        # The clamp may only ever absorb floating-point cancellation.
        assert sigma_run + ev.delta_sigma > -SIGMA_CANCEL_TOL
        sigma_run = max(sigma_run + ev.delta_sigma, 0.0)
        premul = premul + ev.delta_premul
        if active_weights is not None:
            if ev.kind == ENTER:
                active_weights[ev.primitive_index] = ev.delta_sigma
            else:
                active_weights.pop(ev.primitive_index, None)
        t_prev = ev.t
        applied += 1
    color = color + T * np.asarray(background, dtype=np.float64)
    if state_out is not None:
        state_out.sigma_running = sigma_run
        state_out.premul_running = premul.copy()
        state_out.transmittance = T
        state_out.accum_color = color.copy()
        state_out.t_prev = t_prev
        state_out.events_applied = applied
    return color, T


def render_ray(scene: Scene, ray: Ray, bvh=None, t_stop: float = 0.0):
    """Contract path for one ray: BVH trace, event build, composite."""
    if bvh is None:
        bvh = build(scene)
    pairs = list(trace_pairs(bvh, ray))
    events = build_events(pairs, scene, ray.direction)
    return composite_ray(events, scene.background, t_stop)


def render_rows(scene: Scene, camera: CameraModel, rows, settings: RenderSettings):
    """Render selected image rows; rows render identically to render_image.

    Randomness is derived per row from the settings seed, so any subset or
    worker split reproduces the full-image pixels exactly.
    """
    arrays = SceneArrays.from_scene(scene)
    rows = list(rows)
    out = np.zeros((len(rows), camera.width, 3))
    for i, row in enumerate(rows):
        out[i] = _render_one_row(arrays, camera, int(row), settings)
    return out


def render_image(scene: Scene, camera: CameraModel, settings: RenderSettings | None = None,
                 bvh=None):
    """Render a full image; averages spp jittered samples per pixel.

    Deterministic for a fixed seed regardless of thread count: worker rows
    share one pre-seeded random stream indexed by pixel.
    """
    settings = settings or RenderSettings()
    if camera.width * camera.height <= 0:
        raise ValueError("empty image")
    if camera.width * camera.height > 64_000_000:
        raise MemoryError(f"image {camera.width}x{camera.height} exceeds the allocation guard")
    engine = settings.engine
    if engine == "perray":
        return _render_image_perray(scene, camera, settings, bvh)
    if settings.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        bands = np.array_split(np.arange(camera.height), settings.threads)
        image = np.zeros((camera.height, camera.width, 3))

        def work(band):
            return band, _render_band(scene, camera, band, settings)

        with ThreadPoolExecutor(max_workers=settings.threads) as pool:
            for band, block in pool.map(work, [b for b in bands if len(b)]):
                image[band] = block
        return image
    return _render_band(scene, camera, np.arange(camera.height), settings)


def _render_band(scene, camera, rows, settings):
    arrays = SceneArrays.from_scene(scene)
    out = np.zeros((len(rows), camera.width, 3))
    for i, row in enumerate(rows):
        out[i] = _render_one_row(arrays, camera, int(row), settings)
    return out


def _render_one_row(arrays, camera, row, settings):
    n = camera.width
    px = np.arange(n, dtype=np.float64)
    py = np.full(n, float(row))
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=settings.seed, spawn_key=(row,)))
    )
    accum = np.zeros((n, 3))
    for _ in range(settings.spp):
        if settings.jitter:
            off = rng.random((n, 2))
        else:
            off = np.full((n, 2), 0.5)
        if camera.kind == "thin_lens" and camera.aperture_radius > 0 and (
            settings.jitter or settings.spp > 1
        ):
            r = np.sqrt(rng.random((n, 1)))
            theta = rng.random((n, 1)) * (2 * math.pi)
            lens_samples = np.concatenate([r * np.cos(theta), r * np.sin(theta)], axis=1)
        else:
            lens_samples = np.zeros((n, 2))
        origins, dirs = generate_rays(camera, px + off[:, 0], py + off[:, 1], lens_samples)
        result = batched.forward(arrays, origins, dirs, t_stop=settings.t_stop)
        accum += result.colors
    return accum / settings.spp


def _render_image_perray(scene, camera, settings, bvh):
    """Reference image path: scalar BVH trace and composite per ray."""
    if bvh is None:
        bvh = build(scene)
    image = np.zeros((camera.height, camera.width, 3))
    for row in range(camera.height):
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(entropy=settings.seed, spawn_key=(row,)))
        )
        for col in range(camera.width):
            accum = np.zeros(3)
            for _ in range(settings.spp):
                if settings.jitter:
                    u, v = rng.random(2)
                else:
                    u = v = 0.5
                from .geometry import generate_ray

                ray = generate_ray(camera, col + u, row + v)
                color, _ = render_ray(scene, ray, bvh=bvh, t_stop=settings.t_stop)
                accum += color
            image[row, col] = accum / settings.spp
    return image


def density_profile(sigma: float, offsets, radius: float = 1.0) -> np.ndarray:
    """Opacity across a sphere of the given radius at a fixed density.

    chord(b) = 2 * sqrt(radius^2 - b^2) for |b| < radius, else 0, and the
    opacity is 1 - exp(-sigma * chord).
    """
    b = np.asarray(offsets, dtype=np.float64)
    chord = 2.0 * np.sqrt(np.maximum(radius * radius - b * b, 0.0))
    return -np.expm1(-sigma * chord)


def opacity_profile(primitive, view_dir, offsets, sigma_override: float | None = None):
    """Opacity of a single primitive over a family of parallel rays.

    Each ray travels along view_dir with the given impact parameter
    (world-unit offset perpendicular to view_dir through the center).
    """
    view_dir = np.asarray(view_dir, dtype=np.float64)
    view_dir = view_dir / np.linalg.norm(view_dir)
    sigma = (
        sigma_override
        if sigma_override is not None
        else sigma_from_alpha(primitive.alpha, primitive.scale)
    )
    # Any unit vector orthogonal to the view direction.
    helper = np.array([1.0, 0.0, 0.0])
    if abs(view_dir @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    side = np.cross(view_dir, helper)
    side /= np.linalg.norm(side)
    far = float(np.max(primitive.scale)) * 4.0 + 1.0
    out = np.zeros(len(offsets))
    for i, b in enumerate(offsets):
        origin = primitive.mean + b * side - far * view_dir
        hit = intersect_ellipsoid(Ray(origin, view_dir), primitive)
        if hit is None:
            out[i] = 0.0
        else:
            out[i] = -math.expm1(-sigma * (hit.t_exit - hit.t_enter))
    return out
