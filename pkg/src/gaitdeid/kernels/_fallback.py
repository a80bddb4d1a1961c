"""Numpy implementations of the hot kernels (reference + fallback)."""
import numpy as np

MASS_GUARD = 1e-6
N_MOMENTS = 6


def _grids(H, W):
    r = (np.arange(H, dtype=np.float64) + 0.5) / H
    c = (np.arange(W, dtype=np.float64) + 0.5) / W
    return r[:, None], c[None, :]


def frame_moments(x):
    """Per-frame soft moments, shape (L, 6).

    Columns: mass fraction, centroid row, centroid col, row variance,
    col variance, row/col covariance. Coordinates are pixel centres scaled
    to (0, 1).
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    L, H, W = x.shape
    r, c = _grids(H, W)
    m = x.sum(axis=(1, 2))
    D = m + MASS_GUARD
    rb = (x * r).sum(axis=(1, 2)) / D
    cb = (x * c).sum(axis=(1, 2)) / D
    dr = r[None] - rb[:, None, None]
    dc = c[None] - cb[:, None, None]
    vr = (x * dr * dr).sum(axis=(1, 2)) / D
    vc = (x * dc * dc).sum(axis=(1, 2)) / D
    cv = (x * dr * dc).sum(axis=(1, 2)) / D
    return np.stack([m / (H * W), rb, cb, vr, vc, cv], axis=1)


def frame_moments_grad(x, g):
    """Vector-Jacobian product of :func:`frame_moments` for upstream ``g`` (L, 6)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    L, H, W = x.shape
    r, c = _grids(H, W)
    f = frame_moments(x)
    D = (x.sum(axis=(1, 2)) + MASS_GUARD)[:, None, None]
    rb = f[:, 1, None, None]
    cb = f[:, 2, None, None]
    vr, vc, cv = (f[:, k, None, None] for k in (3, 4, 5))
    dr = r[None] - rb
    dc = c[None] - cb
    d = MASS_GUARD
    d_rb = dr / D
    d_cb = dc / D
    d_vr = (dr * dr - 2.0 * rb * d * dr / D - vr) / D
    d_vc = (dc * dc - 2.0 * cb * d * dc / D - vc) / D
    d_cv = (dr * dc - dr * cb * d / D - dc * rb * d / D - cv) / D
    gk = [g[:, k, None, None] for k in range(N_MOMENTS)]
    return (
        gk[0] / (H * W)
        + gk[1] * d_rb
        + gk[2] * d_cb
        + gk[3] * d_vr
        + gk[4] * d_vc
        + gk[5] * d_cv
    )


def contour_mask(x):
    """dilation XOR erosion with a 3x3 cross, zero padding; x is binary (L, H, W)."""
    b = np.asarray(x) >= 0.5
    p = np.pad(b, ((0, 0), (1, 1), (1, 1)), constant_values=False)
    centre = p[:, 1:-1, 1:-1]
    up, down = p[:, :-2, 1:-1], p[:, 2:, 1:-1]
    left, right = p[:, 1:-1, :-2], p[:, 1:-1, 2:]
    dil = centre | up | down | left | right
    ero = centre & up & down & left & right
    return (dil ^ ero).astype(np.uint8)
