"""Vectorized ray-batch engine: forward compositing and its adjoint.

The slot layout fixes 2P event slots per ray: slot p is the entry of
primitive p, slot P+p its exit. Invalid slots sort to the end with +inf
distance and zero deltas, so a stable argsort on distance reproduces the
scalar tie-break (enter before exit, then primitive index) exactly.

Running sums are cumulative sums of the sorted signed density deltas and
the per-segment transmittance is the exponential of the cumulative optical
depth (the telescoped product), so neither pass loops over events in
Python. Per-channel quantities never materialize per slot: with
share_i = (1 - exp(-sigma_i dt_i)) / sigma_i the composite is

    C = sum_i T_i share_i premul_i = sum_p sigma_p c_p h_p,
    h_p = sum_{segments inside p} T_i share_i,

and h_p is a difference of the running sum of T*share between the exit and
entry slots of p. The adjoint uses the same rank-1 structure, reducing the
premultiplied-color suffix sums to scalar streams dotted with dL/dC once.
Everything runs in the dtype of the scene arrays (float64 for verification
paths, float32 for the training hot loop).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import sh
from .geometry import intersect_batch
from .scene import ALPHA_SCALE, SceneArrays

try:
    from . import kernels as _kernels

    HAVE_FUSED = _kernels.HAVE_NUMBA
except ImportError:  # pragma: no cover
    HAVE_FUSED = False


@dataclass
class BatchTape:
    """Everything the batched backward pass needs from a forward pass."""

    arrays: SceneArrays
    origins: np.ndarray
    dirs: np.ndarray
    t_stop: float
    basis: np.ndarray  # (N, B)
    raw_sh: np.ndarray  # (N, P, 3) pre-activation color
    colors_prim: np.ndarray  # (N, P, 3) activated color per primitive
    t_enter: np.ndarray  # (N, P)
    t_exit: np.ndarray  # (N, P)
    valid: np.ndarray  # (N, P)
    enter_clamped: np.ndarray  # (N, P)
    exit_clamped: np.ndarray  # (N, P)
    o_loc: np.ndarray  # (N, P, 3)
    d_loc: np.ndarray  # (N, P, 3)
    order: np.ndarray  # (N, 2P) slot sort permutation
    segs: dict  # per-segment scalar streams, see _segment_quantities


@dataclass
class ForwardResult:
    colors: np.ndarray  # (N, 3)
    transmittance: np.ndarray  # (N,)
    tape: BatchTape | None = None
    weights: np.ndarray | None = None  # (N, P) per-primitive color weight


@dataclass
class BatchGrads:
    """Per-primitive parameter gradients reduced over a ray batch."""

    d_mean: np.ndarray  # (P, 3)
    d_quat: np.ndarray  # (P, 4), tangent-projected
    d_scale: np.ndarray  # (P, 3)
    d_alpha: np.ndarray  # (P,)
    d_sh: np.ndarray  # (P, B, 3)
    mean_grad_norm_sum: np.ndarray  # (P,) summed per-ray ||dL/dmean||
    visibility_count: np.ndarray  # (P,) rays with nonzero contribution


def _gather(order, arr):
    """Per-ray slot permutation via flat indexing; arr is (N, 2P) or (N, 2P, C)."""
    n, two_p = order.shape
    flat = order + (np.arange(n)[:, None] * two_p)
    if arr.ndim == 2:
        return arr.reshape(-1)[flat]
    return arr.reshape(-1, arr.shape[-1])[flat]


def _shift_left(arr, fill=0.0):
    out = np.empty_like(arr)
    out[:, :-1] = arr[:, 1:]
    out[:, -1] = fill
    return out


def _reverse_cumsum(arr):
    return np.cumsum(arr[:, ::-1], axis=1)[:, ::-1]


def _segment_quantities(t_sorted, dsig_sorted, t_stop):
    """Closed-form per-segment scalar streams.

    Slot k >= 1 is the segment between events k-1 and k; slot 0 is the
    empty stretch before the first event. Composited segments are those at
    or before the early-termination slot with positive length and density.
    """
    n, two_p = t_sorted.shape
    dtype = t_sorted.dtype
    sigma_after = np.cumsum(dsig_sorted, axis=1)
    sigma_seg = np.empty_like(sigma_after)
    sigma_seg[:, 0] = 0.0
    sigma_seg[:, 1:] = sigma_after[:, :-1]
    dt = np.diff(t_sorted, axis=1, prepend=t_sorted[:, :1])
    beta = np.maximum(sigma_seg, 0.0) * dt
    cum_beta = np.cumsum(beta, axis=1)
    T_after = np.exp(-cum_beta)
    stopped = T_after < t_stop
    any_stop = stopped.any(axis=1)
    n_applied = np.where(any_stop, np.argmax(stopped, axis=1), two_p)
    seg_mask = ((np.arange(two_p)[None, :] <= n_applied[:, None]) & (dt > 0.0) & (sigma_seg > 0.0))
    maskf = seg_mask.astype(dtype)
    T_before = T_after * np.exp(beta)
    safe_sigma = np.where(sigma_seg > 0.0, sigma_seg, dtype.type(1.0))
    share = (-np.expm1(-beta) / safe_sigma) * maskf
    slot_weight = T_before * share
    final_T = np.take_along_axis(T_after, np.minimum(n_applied, two_p - 1)[:, None], axis=1)[:, 0]
    return {
        "sigma_seg": sigma_seg,
        "safe_sigma": safe_sigma,
        "dt": dt,
        "T_after": T_after,
        "seg_maskf": maskf,
        "share": share,
        "slot_weight": slot_weight,
        "cum_slot_weight": np.cumsum(slot_weight, axis=1),
        "n_applied": n_applied,
        "final_T": final_T,
    }


def _quat_matrix_derivatives_batch(quats: np.ndarray) -> np.ndarray:
    """(P, 4) unit quaternions -> (P, 4, 3, 3) rotation derivatives."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    P = quats.shape[0]
    zero = np.zeros(P, dtype=quats.dtype)
    dR = np.empty((P, 4, 3, 3), dtype=quats.dtype)
    dR[:, 0] = 2.0 * np.stack(
        [np.stack([zero, -z, y], -1), np.stack([z, zero, -x], -1), np.stack([-y, x, zero], -1)], 1
    )
    dR[:, 1] = 2.0 * np.stack(
        [np.stack([zero, y, z], -1), np.stack([y, -2 * x, -w], -1), np.stack([z, w, -2 * x], -1)], 1
    )
    dR[:, 2] = 2.0 * np.stack(
        [np.stack([-2 * y, x, w], -1), np.stack([x, zero, z], -1), np.stack([-w, z, -2 * y], -1)], 1
    )
    dR[:, 3] = 2.0 * np.stack(
        [np.stack([-2 * z, -w, x], -1), np.stack([w, -2 * z, y], -1), np.stack([x, y, zero], -1)], 1
    )
    return dR


def forward(
    arrays: SceneArrays,
    origins: np.ndarray,
    dirs: np.ndarray,
    t_stop: float = 0.0,
    t_min: float = 0.0,
    t_max: float = math.inf,
    want_tape: bool = False,
    want_weights: bool = False,
    engine: str = "auto",
) -> ForwardResult:
    """Composite a batch of rays against the whole scene.

    origins/dirs are (N, 3); directions must be unit. Matches the scalar
    trace/build_events/composite_ray pipeline ray for ray. engine picks the
    fused numba kernels when available ("auto"), or forces "numpy"/"fused".
    """
    if engine == "auto":
        engine = "fused" if HAVE_FUSED else "numpy"
    if engine == "fused":
        return _forward_fused(arrays, origins, dirs, t_stop, t_min, t_max, want_tape)
    dtype = arrays.means.dtype
    origins = np.ascontiguousarray(origins, dtype=dtype)
    dirs = np.ascontiguousarray(dirs, dtype=dtype)
    n = origins.shape[0]
    p = arrays.count
    bg = arrays.background.astype(dtype)
    if p == 0:
        colors = np.broadcast_to(bg, (n, 3)).copy()
        return ForwardResult(
            colors, np.ones(n, dtype=dtype), None, np.zeros((n, 0)) if want_weights else None
        )

    nb = sh.n_coeffs(arrays.sh_degree_active)
    basis = sh.sh_basis(arrays.sh_degree_active, dirs)
    raw = np.tensordot(basis, arrays.sh_coeffs[:, :nb], axes=([1], [1]))  # (N, P, 3)

    te, tx, valid, enter_clamped, exit_clamped, o_loc, d_loc = intersect_batch(
        origins, dirs, arrays, t_min, t_max
    )

    # The activation is only needed where the ray actually hits.
    colors_prim = np.zeros_like(raw)
    colors_prim[valid] = sh.softplus(raw[valid])

    vmask = valid.astype(dtype)
    sig = arrays.sigmas[None, :] * vmask
    inf = dtype.type(np.inf)
    t_slots = np.concatenate([np.where(valid, te, inf), np.where(valid, tx, inf)], axis=1)
    dsig = np.concatenate([sig, -sig], axis=1)

    order = np.argsort(t_slots, axis=1, kind="stable")
    t_sorted = _gather(order, t_slots)
    dsig_sorted = _gather(order, dsig)

    # Trailing invalid slots become zero-length segments at the last exit.
    any_valid = valid.any(axis=1)
    t_last = np.where(any_valid, np.max(np.where(valid, tx, -inf), axis=1), dtype.type(0.0))
    np.minimum(t_sorted, t_last[:, None], out=t_sorted)

    segs = _segment_quantities(t_sorted, dsig_sorted, t_stop)

    # h_p: summed T*share over the segments covered by primitive p.
    inv_order = np.argsort(order, axis=1, kind="stable")
    cum = segs["cum_slot_weight"]
    h = np.take_along_axis(cum, inv_order[:, p:], axis=1) - np.take_along_axis(
        cum, inv_order[:, :p], axis=1
    )
    weights = sig * h
    colors = np.einsum("np,npc->nc", weights, colors_prim)
    colors += segs["final_T"][:, None] * bg

    tape = None
    if want_tape:
        segs["inv_order"] = inv_order
        tape = BatchTape(
            arrays=arrays,
            origins=origins,
            dirs=dirs,
            t_stop=t_stop,
            basis=basis,
            raw_sh=raw,
            colors_prim=colors_prim,
            t_enter=te,
            t_exit=tx,
            valid=valid,
            enter_clamped=enter_clamped,
            exit_clamped=exit_clamped,
            o_loc=o_loc,
            d_loc=d_loc,
            order=order,
            segs=segs,
        )
    return ForwardResult(colors, segs["final_T"], tape, weights if want_weights else None)


def backward(tape, dL_dC: np.ndarray, weights: np.ndarray | None = None) -> BatchGrads:
    """Adjoint of forward: accumulate d(loss)/d(primitive parameters).

    dL_dC is (N, 3). Visibility counting uses the forward color weights
    when given; otherwise any ray with a valid pair counts as visible.
    """
    if isinstance(tape, FusedTape):
        return _backward_fused(tape, dL_dC)
    arrays = tape.arrays
    n, p = tape.valid.shape
    two_p = 2 * p
    dtype = arrays.means.dtype
    dL_dC = np.ascontiguousarray(dL_dC, dtype=dtype)
    segs = tape.segs
    valid = tape.valid
    vmask = valid.astype(dtype)
    order, inv_order = tape.order, segs["inv_order"]
    sig_prim = arrays.sigmas.astype(dtype)

    # Scalar stream of dL . premul per slot; its running sum is dL . premul_seg.
    dl_color = np.einsum("nc,npc->np", dL_dC, tape.colors_prim)
    pm_dot = sig_prim[None, :] * vmask * dl_color
    dpre_dot_sorted = _gather(order, np.concatenate([pm_dot, -pm_dot], axis=1))
    cum_pm = np.cumsum(dpre_dot_sorted, axis=1)
    dl_premul_seg = np.empty_like(cum_pm)
    dl_premul_seg[:, 0] = 0.0
    dl_premul_seg[:, 1:] = cum_pm[:, :-1]

    slot_weight = segs["slot_weight"]
    safe_sigma = segs["safe_sigma"]
    maskf = segs["seg_maskf"]
    dl_dot_color = dl_premul_seg / safe_sigma

    # Suffix of dL . (segment contributions) behind each slot, plus background.
    contrib_dot = slot_weight * dl_premul_seg
    suffix_contrib = _reverse_cumsum(contrib_dot)
    dl_bg = dL_dC @ arrays.background.astype(dtype)
    remaining_next = _shift_left(suffix_contrib) + (segs["final_T"] * dl_bg)[:, None]

    # d(loss)/d(optical depth): own term grows, everything behind attenuates.
    g_beta = (segs["T_after"] * dl_dot_color - remaining_next) * maskf
    g_sigma_seg = g_beta * segs["dt"] - slot_weight * dl_dot_color
    g_time = g_beta * segs["sigma_seg"]

    applied = np.arange(two_p)[None, :] < segs["n_applied"][:, None]
    appliedf = applied.astype(dtype)
    # Event deltas influence every segment composited after them.
    g_dsig_sorted = _shift_left(_reverse_cumsum(g_sigma_seg)) * appliedf
    # Premul suffix is rank-1 in the channel: dL_ch times the T*share suffix.
    g_pre_scalar_sorted = _shift_left(_reverse_cumsum(slot_weight)) * appliedf
    # An event time ends one segment and starts the next.
    g_t_sorted = g_time - _shift_left(g_time)

    g_dsig = _gather(inv_order, g_dsig_sorted)
    g_pre_scalar = _gather(inv_order, g_pre_scalar_sorted)
    g_t = _gather(inv_order, g_t_sorted)

    # Signed event deltas fold to per-primitive density and color gradients.
    g_delta = (g_dsig[:, :p] - g_dsig[:, p:]) * vmask
    g_h = (g_pre_scalar[:, :p] - g_pre_scalar[:, p:]) * vmask  # d(loss)/d(premul) along dL
    g_sigma_prim = g_delta + g_h * dl_color

    # Color chain: softplus then the SH expansion, only where rays hit.
    g_raw = np.zeros_like(tape.raw_sh)
    scale_chan = (g_h * sig_prim[None, :])[:, :, None] * dL_dC[:, None, :]
    g_raw[valid] = scale_chan[valid] * sh.softplus_grad(tape.raw_sh[valid])
    d_sh = np.tensordot(tape.basis, g_raw, axes=([0], [0])).transpose(1, 0, 2)

    # Density chain: sigma = -log(1 - 0.99 alpha) / min(scale).
    min_axis = np.argmin(arrays.scales, axis=1)
    min_scale = arrays.scales[np.arange(p), min_axis]
    g_sigma_sum = g_sigma_prim.sum(axis=0)
    d_alpha = g_sigma_sum * ALPHA_SCALE / ((1.0 - ALPHA_SCALE * arrays.alphas) * min_scale)
    d_scale = np.zeros((p, 3), dtype=dtype)
    d_scale[np.arange(p), min_axis] -= g_sigma_sum * sig_prim / min_scale

    # Intersection roots chain to mean, scale, and rotation; clamped roots
    # sit at the fixed ray bound and carry no geometric derivative.
    g_te = g_t[:, :p] * vmask * (~tape.enter_clamped)
    g_tx = g_t[:, p:] * vmask * (~tape.exit_clamped)
    dR = _quat_matrix_derivatives_batch(arrays.quats)
    rot_t = np.ascontiguousarray(arrays.rotations.transpose(0, 2, 1))
    d_mean_per_ray = np.zeros((n, p, 3), dtype=dtype)
    d_quat = np.zeros((p, 4), dtype=dtype)
    tiny = np.finfo(dtype).tiny

    for g_root, t_root in ((g_te, tape.t_enter), (g_tx, tape.t_exit)):
        live = valid & (g_root != 0.0)
        if not live.any():
            continue
        w = tape.o_loc + np.where(np.isfinite(t_root), t_root, 0.0)[:, :, None] * tape.d_loc
        denom = 2.0 * np.einsum("npi,npi->np", w, tape.d_loc)
        safe = live & (np.abs(denom) > tiny)
        inv = np.where(safe, g_root, 0.0) / np.where(safe, denom, 1.0)
        ws = w / arrays.scales[None, :, :]
        # dt/dmean = +2 R (w / s) / denom
        rws = np.matmul(ws.transpose(1, 0, 2), rot_t).transpose(1, 0, 2)
        d_mean_per_ray += (2.0 * inv)[:, :, None] * rws
        # dt/dscale_j = +2 w_j^2 / (s_j denom)
        d_scale += np.einsum("np,npj->pj", 2.0 * inv, (w * w) / arrays.scales[None, :, :])
        # dt/dq_l = -2 v . dR_l (w/s) / denom with v the world-frame surface
        # offset; contract the ray dimension first, then the tiny dR tensor.
        v = np.matmul((w * arrays.scales[None, :, :]).transpose(1, 0, 2), rot_t).transpose(1, 0, 2)
        weighted_v = (-2.0 * inv)[:, :, None] * v
        outer = np.matmul(weighted_v.transpose(1, 2, 0), ws.transpose(1, 0, 2))  # (P, 3, 3)
        d_quat += np.einsum("pkij,pij->pk", dR, outer)

    d_mean = d_mean_per_ray.sum(axis=0)

    # Project quaternion gradients onto the tangent space of the unit sphere.
    d_quat -= np.einsum("pk,pk->p", d_quat, arrays.quats)[:, None] * arrays.quats

    visible = weights > 0.0 if weights is not None else valid
    norms = np.sqrt(np.einsum("npi,npi->np", d_mean_per_ray, d_mean_per_ray))
    mean_grad_norm_sum = (norms * visible).sum(axis=0)
    visibility_count = visible.sum(axis=0)

    return BatchGrads(
        d_mean=d_mean,
        d_quat=d_quat,
        d_scale=d_scale,
        d_alpha=d_alpha,
        d_sh=d_sh,
        mean_grad_norm_sum=mean_grad_norm_sum,
        visibility_count=visibility_count,
    )


@dataclass
class FusedTape:
    """Forward state captured by the fused kernel path."""

    arrays: SceneArrays
    origins: np.ndarray
    dirs: np.ndarray
    t_stop: float
    basis: np.ndarray
    t_slots: np.ndarray
    order: np.ndarray
    valid: np.ndarray
    enter_clamped: np.ndarray
    exit_clamped: np.ndarray
    t_enter: np.ndarray
    t_exit: np.ndarray
    t_last: np.ndarray
    n_applied: np.ndarray
    final_sigma: np.ndarray
    final_premul: np.ndarray
    final_T: np.ndarray
    weights: np.ndarray


def _forward_fused(arrays, origins, dirs, t_stop, t_min, t_max, want_tape):
    dtype = arrays.means.dtype
    origins = np.ascontiguousarray(origins, dtype=dtype)
    dirs = np.ascontiguousarray(dirs, dtype=dtype)
    n = origins.shape[0]
    p = arrays.count
    if p == 0:
        colors = np.broadcast_to(arrays.background.astype(np.float64), (n, 3)).copy()
        return ForwardResult(colors, np.ones(n), None, np.zeros((n, 0)))

    t_slots = np.empty((n, 2 * p), dtype=dtype)
    te = np.empty((n, p), dtype=dtype)
    tx = np.empty((n, p), dtype=dtype)
    valid = np.empty((n, p), dtype=np.bool_)
    enter_clamped = np.empty((n, p), dtype=np.bool_)
    exit_clamped = np.empty((n, p), dtype=np.bool_)
    t_last = np.empty(n, dtype=dtype)
    _kernels.intersect_slots(
        origins, dirs, arrays.means, arrays.rotations, arrays.scales,
        float(t_min), float(t_max),
        t_slots, te, tx, valid, enter_clamped, exit_clamped, t_last,
    )
    order = np.argsort(t_slots, axis=1, kind="stable")

    basis = sh.sh_basis(arrays.sh_degree_active, dirs)
    nb = basis.shape[1]
    colors = np.empty((n, 3), dtype=np.float64)
    transmittance = np.empty(n, dtype=np.float64)
    n_applied = np.empty(n, dtype=np.int64)
    weights = np.empty((n, p), dtype=np.float64)
    final_sigma = np.empty(n, dtype=np.float64)
    final_premul = np.empty((n, 3), dtype=np.float64)
    _kernels.forward_composite(
        t_slots, order, valid, t_last,
        arrays.sigmas, basis, arrays.sh_coeffs[:, :nb],
        arrays.background.astype(np.float64), float(t_stop),
        colors, transmittance, n_applied, weights, final_sigma, final_premul,
    )
    tape = None
    if want_tape:
        tape = FusedTape(
            arrays=arrays, origins=origins, dirs=dirs, t_stop=t_stop, basis=basis,
            t_slots=t_slots, order=order, valid=valid,
            enter_clamped=enter_clamped, exit_clamped=exit_clamped,
            t_enter=te, t_exit=tx, t_last=t_last, n_applied=n_applied,
            final_sigma=final_sigma, final_premul=final_premul,
            final_T=transmittance, weights=weights,
        )
    return ForwardResult(colors, transmittance, tape, weights)


def _backward_fused(tape: FusedTape, dL_dC) -> BatchGrads:
    arrays = tape.arrays
    n, p = tape.valid.shape
    dL_dC = np.ascontiguousarray(dL_dC, dtype=np.float64)
    nb = tape.basis.shape[1]
    d_mean = np.zeros((p, 3), dtype=np.float64)
    d_quat = np.zeros((p, 4), dtype=np.float64)
    d_scale = np.zeros((p, 3), dtype=np.float64)
    d_sigma = np.zeros(p, dtype=np.float64)
    d_sh = np.zeros((p, nb, 3), dtype=np.float64)
    stat_norm = np.zeros(p, dtype=np.float64)
    stat_vec = np.zeros((p, 3), dtype=np.float64)
    visibility = np.zeros(p, dtype=np.int64)
    dR = _quat_matrix_derivatives_batch(arrays.quats.astype(np.float64))
    _kernels.backward_composite(
        tape.t_slots, tape.order, tape.valid, tape.enter_clamped, tape.exit_clamped,
        tape.t_last, tape.t_enter, tape.t_exit,
        tape.origins, tape.dirs,
        arrays.means, arrays.rotations, arrays.scales, arrays.quats, dR,
        arrays.sigmas, tape.basis, arrays.sh_coeffs[:, :nb],
        arrays.background.astype(np.float64), dL_dC,
        tape.n_applied, tape.final_sigma, tape.final_premul, tape.final_T, tape.weights,
        d_mean, d_quat, d_scale, d_sigma, d_sh, stat_norm, stat_vec, visibility,
    )
    # Density chain: sigma = -log(1 - 0.99 alpha) / min(scale).
    alphas = arrays.alphas.astype(np.float64)
    scales = arrays.scales.astype(np.float64)
    sigmas = arrays.sigmas.astype(np.float64)
    min_axis = np.argmin(scales, axis=1)
    min_scale = scales[np.arange(p), min_axis]
    d_alpha = d_sigma * ALPHA_SCALE / ((1.0 - ALPHA_SCALE * alphas) * min_scale)
    d_scale[np.arange(p), min_axis] -= d_sigma * sigmas / min_scale

    quats = arrays.quats.astype(np.float64)
    d_quat -= np.einsum("pk,pk->p", d_quat, quats)[:, None] * quats
    return BatchGrads(
        d_mean=d_mean,
        d_quat=d_quat,
        d_scale=d_scale,
        d_alpha=d_alpha,
        d_sh=d_sh,
        mean_grad_norm_sum=stat_norm,
        visibility_count=visibility,
    )
