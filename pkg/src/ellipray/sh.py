"""Real spherical harmonics basis (degrees 0..3) and the softplus color activation."""

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_DEGREE = 3
SOFTPLUS_BETA = 10.0


def n_coeffs(degree: int) -> int:
    """Number of basis functions for degrees 0..degree."""
    return (degree + 1) ** 2


def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Evaluate the real SH basis at unit directions.

    dirs has shape (..., 3); returns (..., (degree+1)**2) with the usual
    flat (l, m) ordering, m ascending within each l.
    """
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"sh degree {degree} outside supported range 0..{MAX_DEGREE}")
    dirs = np.asarray(dirs)
    if dirs.dtype not in (np.float32, np.float64):
        dirs = dirs.astype(np.float64)
    out = np.empty(dirs.shape[:-1] + (n_coeffs(degree),), dtype=dirs.dtype)
    out[..., 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[..., 4] = SH_C2[0] * xy
        out[..., 5] = SH_C2[1] * yz
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * xz
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * xy * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def softplus(x):
    """(1/beta) * log(1 + exp(beta * x)), numerically stable for large |x|."""
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return np.logaddexp(0.0, SOFTPLUS_BETA * x) / SOFTPLUS_BETA


def softplus_grad(x):
    """Derivative of softplus: sigmoid(beta * x)."""
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    bx = SOFTPLUS_BETA * x
    # Stable two-sided sigmoid.
    out = np.empty_like(bx)
    pos = bx >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-bx[pos]))
    e = np.exp(bx[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus_inverse(y):
    """Inverse of softplus; y must be positive."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus_inverse requires positive input")
    by = SOFTPLUS_BETA * y
    # log(exp(by) - 1) = by + log1p(-exp(-by)), stable for large by.
    return (by + np.log1p(-np.exp(-by))) / SOFTPLUS_BETA
