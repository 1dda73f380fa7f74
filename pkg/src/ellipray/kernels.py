"""Fused per-ray kernels for the batched engine (optional, needs numba).

These mirror the scalar event walk exactly: intersection, forward
compositing with running sums, and the adjoint replay that reconstructs
ray state in reverse. Fusing the per-slot arithmetic into one pass per ray
avoids the dozens of large temporary arrays the pure-numpy engine
materializes, which dominates on memory-bound CPUs. All accumulation
happens in float64 registers regardless of the input precision.

Everything here is an implementation detail behind batched.forward /
batched.backward; the numpy engine remains the reference and the two are
differentially tested against each other and against the scalar path.
"""

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


TANGENCY_EPS = 1e-12


@njit(cache=True, nogil=True)
def intersect_slots(
    origins,
    dirs,
    means,
    rotations,
    scales,
    t_min,
    t_max,
    t_slots,
    t_enter,
    t_exit,
    valid,
    enter_clamped,
    exit_clamped,
    t_last,
):
    """Ray-ellipsoid intersection into event slots; slot p enters, P+p exits."""
    n_rays = origins.shape[0]
    n_prims = means.shape[0]
    for n in range(n_rays):
        last = -np.inf
        for p in range(n_prims):
            ox = origins[n, 0] - means[p, 0]
            oy = origins[n, 1] - means[p, 1]
            oz = origins[n, 2] - means[p, 2]
            # local = R^T offset / s
            lox = (rotations[p, 0, 0] * ox + rotations[p, 1, 0] * oy + rotations[p, 2, 0] * oz) / scales[p, 0]
            loy = (rotations[p, 0, 1] * ox + rotations[p, 1, 1] * oy + rotations[p, 2, 1] * oz) / scales[p, 1]
            loz = (rotations[p, 0, 2] * ox + rotations[p, 1, 2] * oy + rotations[p, 2, 2] * oz) / scales[p, 2]
            dx = dirs[n, 0]
            dy = dirs[n, 1]
            dz = dirs[n, 2]
            ldx = (rotations[p, 0, 0] * dx + rotations[p, 1, 0] * dy + rotations[p, 2, 0] * dz) / scales[p, 0]
            ldy = (rotations[p, 0, 1] * dx + rotations[p, 1, 1] * dy + rotations[p, 2, 1] * dz) / scales[p, 1]
            ldz = (rotations[p, 0, 2] * dx + rotations[p, 1, 2] * dy + rotations[p, 2, 2] * dz) / scales[p, 2]
            a = ldx * ldx + ldy * ldy + ldz * ldz
            half_b = lox * ldx + loy * ldy + loz * ldz
            c = lox * lox + loy * loy + loz * loz - 1.0
            disc4 = half_b * half_b - a * c
            ok = disc4 > TANGENCY_EPS
            te = np.inf
            tx = -np.inf
            eclamp = False
            xclamp = False
            if ok:
                sq = np.sqrt(disc4)
                q = -half_b - sq if half_b >= 0.0 else -half_b + sq
                t1 = q / a
                t2 = c / q
                if t1 <= t2:
                    te, tx = t1, t2
                else:
                    te, tx = t2, t1
                if tx <= t_min or te >= t_max:
                    ok = False
                else:
                    if te < t_min:
                        te = t_min
                        eclamp = True
                    if tx > t_max:
                        tx = t_max
                        xclamp = True
                    if tx <= te:
                        ok = False
            if ok:
                valid[n, p] = True
                enter_clamped[n, p] = eclamp
                exit_clamped[n, p] = xclamp
                t_enter[n, p] = te
                t_exit[n, p] = tx
                t_slots[n, p] = te
                t_slots[n, p + n_prims] = tx
                if tx > last:
                    last = tx
            else:
                valid[n, p] = False
                enter_clamped[n, p] = False
                exit_clamped[n, p] = False
                t_enter[n, p] = np.inf
                t_exit[n, p] = -np.inf
                t_slots[n, p] = np.inf
                t_slots[n, p + n_prims] = np.inf
        t_last[n] = last if last > -np.inf else 0.0


@njit(cache=True, nogil=True, inline="always")
def _softplus(x):
    bx = 10.0 * x
    if bx > 0.0:
        return (bx + np.log1p(np.exp(-bx))) / 10.0
    return np.log1p(np.exp(bx)) / 10.0


@njit(cache=True, nogil=True, inline="always")
def _sigmoid10(x):
    bx = 10.0 * x
    if bx >= 0.0:
        return 1.0 / (1.0 + np.exp(-bx))
    e = np.exp(bx)
    return e / (1.0 + e)


@njit(cache=True, nogil=True)
def forward_composite(
    t_slots,
    order,
    valid,
    t_last,
    sigmas,
    basis,
    coeffs,
    background,
    t_stop,
    colors,
    transmittance,
    n_applied,
    weights,
    final_sigma,
    final_premul,
):
    """Per-ray event walk: running sums, closed-form segments, early stop.

    weights[n, p] collects sum(T * a / sigma_i) over the segments covered
    by primitive p, scaled by sigma_p at the end: the color weight of p.
    """
    n_rays, two_p = t_slots.shape
    n_prims = two_p // 2
    nb = basis.shape[1]
    open_flag = np.zeros(n_prims, dtype=np.bool_)
    for n in range(n_rays):
        sigma_run = 0.0
        prem0 = 0.0
        prem1 = 0.0
        prem2 = 0.0
        T = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        cumw = 0.0
        applied = 0
        last = t_last[n]
        t_prev = t_slots[n, order[n, 0]]
        if t_prev > last:
            t_prev = last
        for p in range(n_prims):
            open_flag[p] = False
            weights[n, p] = 0.0
        stopped = False
        for j in range(two_p):
            slot = order[n, j]
            tj = t_slots[n, slot]
            if tj > last:
                tj = last
            dt = tj - t_prev
            if dt > 0.0 and sigma_run > 0.0:
                optical = sigma_run * dt
                share = T * (-np.expm1(-optical)) / sigma_run
                c0 += share * prem0
                c1 += share * prem1
                c2 += share * prem2
                cumw += share
                T *= np.exp(-optical)
                if T < t_stop:
                    stopped = True
                    break
            p = slot if slot < n_prims else slot - n_prims
            if valid[n, p]:
                sig = sigmas[p]
                r = 0.0
                g = 0.0
                b = 0.0
                for k in range(nb):
                    r += basis[n, k] * coeffs[p, k, 0]
                    g += basis[n, k] * coeffs[p, k, 1]
                    b += basis[n, k] * coeffs[p, k, 2]
                r = _softplus(r)
                g = _softplus(g)
                b = _softplus(b)
                if slot < n_prims:
                    sigma_run += sig
                    prem0 += sig * r
                    prem1 += sig * g
                    prem2 += sig * b
                    weights[n, p] = -cumw
                    open_flag[p] = True
                else:
                    sigma_run -= sig
                    prem0 -= sig * r
                    prem1 -= sig * g
                    prem2 -= sig * b
                    weights[n, p] += cumw
                    open_flag[p] = False
                if sigma_run < 0.0:
                    sigma_run = 0.0
            t_prev = tj
            applied += 1
        if stopped:
            # Close out primitives whose exit was never reached.
            for p in range(n_prims):
                if open_flag[p]:
                    weights[n, p] += cumw
        for p in range(n_prims):
            weights[n, p] *= sigmas[p]
        colors[n, 0] = c0 + T * background[0]
        colors[n, 1] = c1 + T * background[1]
        colors[n, 2] = c2 + T * background[2]
        transmittance[n] = T
        n_applied[n] = applied
        final_sigma[n] = sigma_run
        final_premul[n, 0] = prem0
        final_premul[n, 1] = prem1
        final_premul[n, 2] = prem2


@njit(cache=True, nogil=True)
def backward_composite(
    t_slots,
    order,
    valid,
    enter_clamped,
    exit_clamped,
    t_last,
    t_enter,
    t_exit,
    origins,
    dirs,
    means,
    rotations,
    scales,
    quats,
    dR,
    sigmas,
    basis,
    coeffs,
    background,
    dL_dC,
    n_applied,
    final_sigma,
    final_premul,
    transmittance,
    weights,
    d_mean,
    d_quat,
    d_scale_geom,
    d_sigma,
    d_sh,
    stat_norm,
    stat_vec,
    visibility,
):
    """Adjoint replay: reconstruct ray state in reverse and chain gradients.

    Accumulates into the (P, ...) output buffers serially; run one call per
    worker chunk and merge the buffers for parallelism.
    """
    n_rays, two_p = t_slots.shape
    n_prims = two_p // 2
    nb = basis.shape[1]
    g_t_slot = np.empty(two_p, dtype=np.float64)
    dmr = np.empty((n_prims, 3), dtype=np.float64)
    for n in range(n_rays):
        napp = n_applied[n]
        if napp == 0:
            continue
        dl0 = dL_dC[n, 0]
        dl1 = dL_dC[n, 1]
        dl2 = dL_dC[n, 2]
        sigma_rev = final_sigma[n]
        pr0 = final_premul[n, 0]
        pr1 = final_premul[n, 1]
        pr2 = final_premul[n, 2]
        T_rev = transmittance[n]
        rem_dot = T_rev * (dl0 * background[0] + dl1 * background[1] + dl2 * background[2])
        acc_sigma = 0.0
        ac0 = 0.0
        ac1 = 0.0
        ac2 = 0.0
        last = t_last[n]
        for j in range(two_p):
            g_t_slot[j] = 0.0
        j_start = napp if napp < two_p - 1 else two_p - 1
        for j in range(j_start, -1, -1):
            slot = order[n, j]
            if j < napp:
                p = slot if slot < n_prims else slot - n_prims
                if valid[n, p]:
                    sig = sigmas[p]
                    r = 0.0
                    g = 0.0
                    b = 0.0
                    for k in range(nb):
                        r += basis[n, k] * coeffs[p, k, 0]
                        g += basis[n, k] * coeffs[p, k, 1]
                        b += basis[n, k] * coeffs[p, k, 2]
                    rr = _softplus(r)
                    gg = _softplus(g)
                    bb = _softplus(b)
                    sign = 1.0 if slot < n_prims else -1.0
                    # Event deltas influence every later composited segment.
                    d_sigma[p] += sign * (acc_sigma + ac0 * rr + ac1 * gg + ac2 * bb)
                    gc0 = sign * sig * ac0
                    gc1 = sign * sig * ac1
                    gc2 = sign * sig * ac2
                    gr0 = gc0 * _sigmoid10(r)
                    gr1 = gc1 * _sigmoid10(g)
                    gr2 = gc2 * _sigmoid10(b)
                    for k in range(nb):
                        d_sh[p, k, 0] += basis[n, k] * gr0
                        d_sh[p, k, 1] += basis[n, k] * gr1
                        d_sh[p, k, 2] += basis[n, k] * gr2
                    sigma_rev -= sign * sig
                    if sigma_rev < 0.0:
                        sigma_rev = 0.0
                    pr0 -= sign * sig * rr
                    pr1 -= sign * sig * gg
                    pr2 -= sign * sig * bb
            if j == 0:
                break
            tj = t_slots[n, slot]
            if tj > last:
                tj = last
            slot_prev = order[n, j - 1]
            tp = t_slots[n, slot_prev]
            if tp > last:
                tp = last
            dt = tj - tp
            if napp >= j and dt > 0.0 and sigma_rev > 0.0:
                optical = sigma_rev * dt
                E = np.exp(-optical)
                seg_alpha = -np.expm1(-optical)
                T_before = T_rev / E
                cs0 = pr0 / sigma_rev
                cs1 = pr1 / sigma_rev
                cs2 = pr2 / sigma_rev
                dl_cseg = dl0 * cs0 + dl1 * cs1 + dl2 * cs2
                g_beta = T_before * E * dl_cseg - rem_dot
                contrib = T_before * seg_alpha
                gp = contrib / sigma_rev
                g_sigma_seg = g_beta * dt - gp * dl_cseg
                g_time = g_beta * sigma_rev
                g_t_slot[j] += g_time
                g_t_slot[j - 1] -= g_time
                acc_sigma += g_sigma_seg
                ac0 += dl0 * gp
                ac1 += dl1 * gp
                ac2 += dl2 * gp
                rem_dot += contrib * dl_cseg
                T_rev = T_before
        # Chain event-time gradients through the intersection roots.
        for p in range(n_prims):
            dmr[p, 0] = 0.0
            dmr[p, 1] = 0.0
            dmr[p, 2] = 0.0
        for j in range(two_p):
            gt = g_t_slot[j]
            if gt == 0.0:
                continue
            slot = order[n, j]
            p = slot if slot < n_prims else slot - n_prims
            if not valid[n, p]:
                continue
            is_enter = slot < n_prims
            if is_enter:
                if enter_clamped[n, p]:
                    continue
                t_root = t_enter[n, p]
            else:
                if exit_clamped[n, p]:
                    continue
                t_root = t_exit[n, p]
            # Sphere-frame surface point and direction at the root.
            vx = origins[n, 0] + t_root * dirs[n, 0] - means[p, 0]
            vy = origins[n, 1] + t_root * dirs[n, 1] - means[p, 1]
            vz = origins[n, 2] + t_root * dirs[n, 2] - means[p, 2]
            wx = (rotations[p, 0, 0] * vx + rotations[p, 1, 0] * vy + rotations[p, 2, 0] * vz) / scales[p, 0]
            wy = (rotations[p, 0, 1] * vx + rotations[p, 1, 1] * vy + rotations[p, 2, 1] * vz) / scales[p, 1]
            wz = (rotations[p, 0, 2] * vx + rotations[p, 1, 2] * vy + rotations[p, 2, 2] * vz) / scales[p, 2]
            ldx = (rotations[p, 0, 0] * dirs[n, 0] + rotations[p, 1, 0] * dirs[n, 1] + rotations[p, 2, 0] * dirs[n, 2]) / scales[p, 0]
            ldy = (rotations[p, 0, 1] * dirs[n, 0] + rotations[p, 1, 1] * dirs[n, 1] + rotations[p, 2, 1] * dirs[n, 2]) / scales[p, 1]
            ldz = (rotations[p, 0, 2] * dirs[n, 0] + rotations[p, 1, 2] * dirs[n, 1] + rotations[p, 2, 2] * dirs[n, 2]) / scales[p, 2]
            denom = 2.0 * (wx * ldx + wy * ldy + wz * ldz)
            if denom == 0.0:
                continue
            inv = gt / denom
            wsx = wx / scales[p, 0]
            wsy = wy / scales[p, 1]
            wsz = wz / scales[p, 2]
            # dt/dmean = +2 R (w/s) / denom
            mx = 2.0 * inv * (rotations[p, 0, 0] * wsx + rotations[p, 0, 1] * wsy + rotations[p, 0, 2] * wsz)
            my = 2.0 * inv * (rotations[p, 1, 0] * wsx + rotations[p, 1, 1] * wsy + rotations[p, 1, 2] * wsz)
            mz = 2.0 * inv * (rotations[p, 2, 0] * wsx + rotations[p, 2, 1] * wsy + rotations[p, 2, 2] * wsz)
            dmr[p, 0] += mx
            dmr[p, 1] += my
            dmr[p, 2] += mz
            # dt/dscale_j = +2 w_j^2 / (s_j denom)
            d_scale_geom[p, 0] += 2.0 * inv * wx * wx / scales[p, 0]
            d_scale_geom[p, 1] += 2.0 * inv * wy * wy / scales[p, 1]
            d_scale_geom[p, 2] += 2.0 * inv * wz * wz / scales[p, 2]
            # dt/dq_l = -2 v . dR_l (w/s) / denom
            for l in range(4):
                acc = 0.0
                acc += vx * (dR[p, l, 0, 0] * wsx + dR[p, l, 0, 1] * wsy + dR[p, l, 0, 2] * wsz)
                acc += vy * (dR[p, l, 1, 0] * wsx + dR[p, l, 1, 1] * wsy + dR[p, l, 1, 2] * wsz)
                acc += vz * (dR[p, l, 2, 0] * wsx + dR[p, l, 2, 1] * wsy + dR[p, l, 2, 2] * wsz)
                d_quat[p, l] += -2.0 * inv * acc
        for p in range(n_prims):
            gx = dmr[p, 0]
            gy = dmr[p, 1]
            gz = dmr[p, 2]
            if gx != 0.0 or gy != 0.0 or gz != 0.0:
                d_mean[p, 0] += gx
                d_mean[p, 1] += gy
                d_mean[p, 2] += gz
            if weights[n, p] > 0.0:
                stat_norm[p] += np.sqrt(gx * gx + gy * gy + gz * gz)
                stat_vec[p, 0] += gx
                stat_vec[p, 1] += gy
                stat_vec[p, 2] += gz
                visibility[p] += 1
