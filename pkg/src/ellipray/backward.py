"""Adjoint backpropagation: reverse replay of a recorded intersection tape.

The forward pass stores only the per-ray list of intersections and the
final ray state. The backward pass reconstructs every intermediate state in
reverse by inverting the running-sum updates: transmittance is divided by
each segment factor and the segment's contribution is re-added to the
"remaining color" suffix. With those states, the loss gradient flows to
each segment's optical depth, density, and premultiplied color, then
through the intersection roots to primitive pose and through the
activations to the raw parameters.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import sh
from .bvh import build, trace_pairs
from .errors import NumericalInstabilityError, TapeOverflowError
from .geometry import Ray, intersect_t_derivatives
from .renderer import RayState, build_events, composite_ray
from .scene import ALPHA_SCALE, Scene, SceneArrays, eval_color, sigma_from_alpha

TAPE_HARD_CAP = 4096


@dataclass
class IntersectionTape:
    """Per-ray record of a forward pass: intersections plus the final state."""

    pairs: list  # HitPair, in trace order
    t_stop: float
    final_state: RayState

    def __len__(self):
        return len(self.pairs)


@dataclass
class GradientBuffer:
    """Accumulated per-primitive gradients plus the ADC statistics."""

    d_mean: np.ndarray
    d_quat: np.ndarray
    d_scale: np.ndarray
    d_alpha: np.ndarray
    d_sh: np.ndarray
    grad_stat_accum: np.ndarray  # summed ||dL/dmean|| per visible ray/step
    grad_vec_accum: np.ndarray  # summed dL/dmean vectors (clone direction)
    visibility_count: np.ndarray

    @classmethod
    def alloc(cls, n_primitives: int, n_sh_coeffs: int) -> "GradientBuffer":
        return cls(
            d_mean=np.zeros((n_primitives, 3)),
            d_quat=np.zeros((n_primitives, 4)),
            d_scale=np.zeros((n_primitives, 3)),
            d_alpha=np.zeros(n_primitives),
            d_sh=np.zeros((n_primitives, n_sh_coeffs, 3)),
            grad_stat_accum=np.zeros(n_primitives),
            grad_vec_accum=np.zeros((n_primitives, 3)),
            visibility_count=np.zeros(n_primitives, dtype=np.int64),
        )

    def zero(self):
        for arr in (
            self.d_mean,
            self.d_quat,
            self.d_scale,
            self.d_alpha,
            self.d_sh,
            self.grad_stat_accum,
            self.grad_vec_accum,
        ):
            arr[...] = 0.0
        self.visibility_count[...] = 0

    def zero_params(self):
        """Clear parameter gradients but keep the ADC statistics."""
        for arr in (self.d_mean, self.d_quat, self.d_scale, self.d_alpha, self.d_sh):
            arr[...] = 0.0

    def add(self, other: "GradientBuffer"):
        self.d_mean += other.d_mean
        self.d_quat += other.d_quat
        self.d_scale += other.d_scale
        self.d_alpha += other.d_alpha
        self.d_sh += other.d_sh
        self.grad_stat_accum += other.grad_stat_accum
        self.grad_vec_accum += other.grad_vec_accum
        self.visibility_count += other.visibility_count

    def all_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (self.d_mean, self.d_quat, self.d_scale, self.d_alpha, self.d_sh)
        )

    def dump_text(self) -> str:
        """Debug table: primitive index -> per-parameter gradients."""
        lines = ["idx d_alpha d_mean[3] d_scale[3] d_quat[4] d_sh_norm stat vis"]
        for i in range(self.d_alpha.shape[0]):
            mean = " ".join(f"{v:.6g}" for v in self.d_mean[i])
            scale = " ".join(f"{v:.6g}" for v in self.d_scale[i])
            quat = " ".join(f"{v:.6g}" for v in self.d_quat[i])
            lines.append(
                f"{i} {self.d_alpha[i]:.6g} {mean} {scale} {quat} "
                f"{np.linalg.norm(self.d_sh[i]):.6g} "
                f"{self.grad_stat_accum[i]:.6g} {self.visibility_count[i]}"
            )
        return "\n".join(lines)


def tree_merge(buffers: list) -> GradientBuffer:
    """Deterministic pairwise reduction of per-worker partial buffers."""
    if not buffers:
        raise ValueError("no buffers to merge")
    layer = list(buffers)
    while len(layer) > 1:
        nxt = []
        for i in range(0, len(layer) - 1, 2):
            layer[i].add(layer[i + 1])
            nxt.append(layer[i])
        if len(layer) % 2:
            nxt.append(layer[-1])
        layer = nxt
    return layer[0]


def record_forward(scene: Scene, ray: Ray, bvh=None, t_stop: float = 0.0):
    """Forward render of one ray that also returns its intersection tape."""
    if bvh is None:
        bvh = build(scene)
    pairs = list(trace_pairs(bvh, ray))
    if len(pairs) > TAPE_HARD_CAP:
        raise TapeOverflowError(
            f"ray crossed {len(pairs)} primitives, above the tape cap {TAPE_HARD_CAP}"
        )
    events = build_events(pairs, scene, ray.direction)
    state = RayState()
    color, T = composite_ray(events, scene.background, t_stop, state_out=state)
    return color, T, IntersectionTape(pairs, t_stop, state)


def replay_forward(tape: IntersectionTape, scene: Scene, ray: Ray):
    """Recompute the forward color from the tape alone (exactness invariant)."""
    events = build_events(tape.pairs, scene, ray.direction)
    color, _ = composite_ray(events, scene.background, tape.t_stop)
    return color


def backward_ray(
    tape: IntersectionTape,
    scene: Scene,
    ray: Ray,
    dL_dC,
    grads: GradientBuffer,
    ray_id=None,
):
    """Accumulate d(loss)/d(primitive parameters) for one ray into grads.

    Walks the tape's events in reverse from the stored final state. Raises
    NumericalInstabilityError (naming the ray) if any reconstructed state
    stops being finite.
    """
    dL_dC = np.asarray(dL_dC, dtype=np.float64)
    if not tape.pairs:
        return
    events = build_events(tape.pairs, scene, ray.direction)

    # Forward per-primitive quantities the chain rules need.
    prim_indices = sorted({p.primitive_index for p in tape.pairs})
    dsigma = {}
    color_prim = {}
    for pi in prim_indices:
        prim = scene.primitives[pi]
        dsigma[pi] = sigma_from_alpha(prim.alpha, prim.scale)
        color_prim[pi] = eval_color(prim, ray.direction, scene.sh_degree_active)

    weights = {}
    composite_ray(events, scene.background, tape.t_stop, weights_out=weights)

    n_applied = tape.final_state.events_applied
    sigma_rev = tape.final_state.sigma_running
    premul_rev = tape.final_state.premul_running.copy()
    t_rev = tape.final_state.transmittance
    remaining = tape.final_state.transmittance * scene.background
    acc_sigma = 0.0
    acc_premul = np.zeros(3)
    g_sigma_prim = {pi: 0.0 for pi in prim_indices}
    g_color_prim = {pi: np.zeros(3) for pi in prim_indices}
    g_t_event = np.zeros(len(events))

    for j in range(len(events) - 1, -1, -1):
        ev = events[j]
        if j < n_applied:
            # Event deltas influence every segment composited after them.
            sign = 1.0 if ev.kind == "enter" else -1.0
            g_sigma_prim[ev.primitive_index] += sign * (
                acc_sigma + float(acc_premul @ color_prim[ev.primitive_index])
            )
            g_color_prim[ev.primitive_index] += sign * dsigma[ev.primitive_index] * acc_premul
            sigma_rev = max(sigma_rev - ev.delta_sigma, 0.0)
            premul_rev = premul_rev - ev.delta_premul
        if j == 0:
            break
        dt = ev.t - events[j - 1].t
        if not (n_applied >= j and dt > 0.0 and sigma_rev > 0.0):
            continue
        optical = sigma_rev * dt
        seg_factor = math.exp(-optical)
        seg_alpha = -math.expm1(-optical)
        t_before = t_rev / seg_factor
        seg_color = premul_rev / sigma_rev
        if not (math.isfinite(t_before) and np.all(np.isfinite(seg_color))):
            name = f"ray {ray_id}" if ray_id is not None else "ray"
            raise NumericalInstabilityError(
                f"non-finite reconstructed state at event {j} on {name}"
            )
        g_beta = float(dL_dC @ (t_before * seg_color * seg_factor - remaining))
        contrib = t_before * seg_alpha
        g_premul_seg = dL_dC * (contrib / sigma_rev)
        g_sigma_seg = g_beta * dt - float(g_premul_seg @ seg_color)
        g_time = g_beta * sigma_rev
        g_t_event[j] += g_time
        g_t_event[j - 1] -= g_time
        acc_sigma += g_sigma_seg
        acc_premul = acc_premul + g_premul_seg
        remaining = remaining + contrib * seg_color
        t_rev = t_before

    # Fold event-time gradients onto the primitives' entry/exit distances.
    g_t_enter = {pi: 0.0 for pi in prim_indices}
    g_t_exit = {pi: 0.0 for pi in prim_indices}
    for j, ev in enumerate(events):
        if ev.kind == "enter":
            g_t_enter[ev.primitive_index] += g_t_event[j]
        else:
            g_t_exit[ev.primitive_index] += g_t_event[j]

    pairs_by_prim = {p.primitive_index: p for p in tape.pairs}
    basis = sh.sh_basis(scene.sh_degree_active, ray.direction)
    for pi in prim_indices:
        prim = scene.primitives[pi]
        pair = pairs_by_prim[pi]
        d_mean = np.zeros(3)
        d_scale = np.zeros(3)
        d_quat = np.zeros(4)

        for g_root, t_root, clamped in (
            (g_t_enter[pi], pair.t_enter, pair.t_enter <= ray.t_min),
            (g_t_exit[pi], pair.t_exit, pair.t_exit >= ray.t_max),
        ):
            if g_root == 0.0 or clamped:
                continue
            deriv = intersect_t_derivatives(ray, prim, t_root)
            d_mean += g_root * deriv["mean"]
            d_scale += g_root * deriv["scale"]
            d_quat += g_root * deriv["quat"]

        # Density chain: sigma = -log(1 - 0.99 alpha) / min(scale).
        min_axis = int(np.argmin(prim.scale))
        min_scale = prim.scale[min_axis]
        gs = g_sigma_prim[pi]
        d_alpha = gs * ALPHA_SCALE / ((1.0 - ALPHA_SCALE * prim.alpha) * min_scale)
        d_scale[min_axis] -= gs * dsigma[pi] / min_scale

        # Color chain: softplus after the SH expansion.
        degree = min(scene.sh_degree_active, prim.max_degree)
        nb = sh.n_coeffs(degree)
        raw = basis[:nb] @ prim.sh_coeffs[:nb]
        g_raw = g_color_prim[pi] * sh.softplus_grad(raw)
        d_sh = np.outer(basis[:nb], g_raw)

        d_quat = d_quat - float(d_quat @ prim.rotation) * prim.rotation

        grads.d_mean[pi] += d_mean
        grads.d_quat[pi] += d_quat
        grads.d_scale[pi] += d_scale
        grads.d_alpha[pi] += d_alpha
        grads.d_sh[pi, :nb] += d_sh
        if weights.get(pi, 0.0) > 0.0:
            grads.grad_stat_accum[pi] += float(np.linalg.norm(d_mean))
            grads.grad_vec_accum[pi] += d_mean
            grads.visibility_count[pi] += 1

    if not grads.all_finite():
        name = f"ray {ray_id}" if ray_id is not None else "ray"
        raise NumericalInstabilityError(f"non-finite gradient produced by {name}")


def _quat_tangent_basis(q: np.ndarray) -> np.ndarray:
    """Three orthonormal directions tangent to the unit sphere at q."""
    basis = []
    for k in range(4):
        v = np.zeros(4)
        v[k] = 1.0
        v -= (v @ q) * q
        for b in basis:
            v -= (v @ b) * b
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            basis.append(v / norm)
        if len(basis) == 3:
            break
    return np.stack(basis)


def finite_difference_check(
    scene: Scene,
    rays: list,
    loss_weights=None,
    h: float = 1e-6,
    params=("mean", "quat", "scale", "alpha", "sh"),
    t_stop: float = 0.0,
    rel_floor: float | None = None,
):
    """Compare adjoint gradients against central finite differences.

    The scalar loss is sum(loss_weights * colors) over the given rays.
    Step sizes are scale-aware (h * max(1, |value|)); quaternions are
    perturbed along the tangent space with renormalization, matching the
    projected analytic gradient. Returns a report dict with the worst
    relative error and its location.
    """
    from . import batched

    arrays = SceneArrays.from_scene(scene)
    origins = np.stack([r.origin for r in rays])
    dirs = np.stack([r.direction for r in rays])
    if loss_weights is None:
        loss_weights = np.ones((len(rays), 3))
    loss_weights = np.asarray(loss_weights, dtype=np.float64)

    def loss_of(arr: SceneArrays) -> float:
        res = batched.forward(arr, origins, dirs, t_stop=t_stop)
        return float(np.sum(loss_weights * res.colors))

    result = batched.forward(arrays, origins, dirs, t_stop=t_stop, want_tape=True)
    grads = batched.backward(result.tape, loss_weights)

    analytic = {
        "mean": grads.d_mean,
        "quat": grads.d_quat,
        "scale": grads.d_scale,
        "alpha": grads.d_alpha[:, None],
        "sh": grads.d_sh.reshape(arrays.count, -1),
    }
    if rel_floor is None:
        gmax = max(float(np.max(np.abs(a))) for a in analytic.values()) if arrays.count else 1.0
        rel_floor = 1e-8 * max(1.0, gmax)

    worst = {"rel_error": 0.0, "where": None}
    per_class = {}

    def consider(name, pi, comp, a_val, f_val):
        rel = abs(a_val - f_val) / max(abs(a_val), abs(f_val), rel_floor)
        per_class[name] = max(per_class.get(name, 0.0), rel)
        if rel > worst["rel_error"]:
            worst["rel_error"] = rel
            worst["where"] = (name, pi, comp, a_val, f_val)

    for pi in range(arrays.count):
        if "mean" in params:
            for k in range(3):
                step = h * max(1.0, abs(arrays.means[pi, k]))
                plus = arrays.means[pi, k]
                arrays.means[pi, k] = plus + step
                lp = loss_of(arrays)
                arrays.means[pi, k] = plus - step
                lm = loss_of(arrays)
                arrays.means[pi, k] = plus
                consider("mean", pi, k, analytic["mean"][pi, k], (lp - lm) / (2 * step))
        if "scale" in params:
            for k in range(3):
                base = arrays.scales[pi, k]
                step = h * max(1.0, abs(base))
                arrays.scales[pi, k] = base + step
                arrays.sigmas = _resigma(arrays)
                lp = loss_of(arrays)
                arrays.scales[pi, k] = base - step
                arrays.sigmas = _resigma(arrays)
                lm = loss_of(arrays)
                arrays.scales[pi, k] = base
                arrays.sigmas = _resigma(arrays)
                consider("scale", pi, k, analytic["scale"][pi, k], (lp - lm) / (2 * step))
        if "alpha" in params:
            base = arrays.alphas[pi]
            step = min(h * max(1.0, abs(base)), (1.0 - base) * 0.5, base * 0.5 + h)
            arrays.alphas[pi] = base + step
            arrays.sigmas = _resigma(arrays)
            lp = loss_of(arrays)
            arrays.alphas[pi] = base - step
            arrays.sigmas = _resigma(arrays)
            lm = loss_of(arrays)
            arrays.alphas[pi] = base
            arrays.sigmas = _resigma(arrays)
            consider("alpha", pi, 0, analytic["alpha"][pi, 0], (lp - lm) / (2 * step))
        if "quat" in params:
            q0 = arrays.quats[pi].copy()
            R0 = arrays.rotations[pi].copy()
            for k, v in enumerate(_quat_tangent_basis(q0)):
                qp = q0 + h * v
                arrays.quats[pi] = qp / np.linalg.norm(qp)
                arrays.rotations[pi] = _rot_of(arrays.quats[pi])
                lp = loss_of(arrays)
                qm = q0 - h * v
                arrays.quats[pi] = qm / np.linalg.norm(qm)
                arrays.rotations[pi] = _rot_of(arrays.quats[pi])
                lm = loss_of(arrays)
                arrays.quats[pi] = q0
                arrays.rotations[pi] = R0
                consider(
                    "quat", pi, k, float(analytic["quat"][pi] @ v), (lp - lm) / (2 * h)
                )
        if "sh" in params:
            nb = sh.n_coeffs(arrays.sh_degree_active)
            for b in range(nb):
                for c in range(3):
                    base = arrays.sh_coeffs[pi, b, c]
                    step = h * max(1.0, abs(base))
                    arrays.sh_coeffs[pi, b, c] = base + step
                    lp = loss_of(arrays)
                    arrays.sh_coeffs[pi, b, c] = base - step
                    lm = loss_of(arrays)
                    arrays.sh_coeffs[pi, b, c] = base
                    consider(
                        "sh",
                        pi,
                        (b, c),
                        grads.d_sh[pi, b, c],
                        (lp - lm) / (2 * step),
                    )

    return {"max_rel_error": worst["rel_error"], "worst": worst["where"], "per_class": per_class}


def _resigma(arrays: SceneArrays):
    inner = 1.0 - ALPHA_SCALE * arrays.alphas
    return -np.log(inner) / np.min(arrays.scales, axis=1)


def _rot_of(q):
    from .scene import quat_to_matrix

    return quat_to_matrix(q)
