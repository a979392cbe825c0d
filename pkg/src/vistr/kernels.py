"""Hot numeric kernels, each with a numba path and a numpy path.

The public names (:func:`render_capsules`, :func:`se_kernel_matrix`) dispatch
to the numba implementation when :data:`vistr._jit.USE_NUMBA` is true. Both
paths use the same floating-point operation order, so rasterized masks are
bit-identical between them.
"""

import math

import numpy as np

from ._jit import HAVE_NUMBA, USE_NUMBA, njit

__all__ = [
    "render_capsules",
    "render_capsules_numpy",
    "render_capsules_numba",
    "se_kernel_matrix",
    "se_kernel_matrix_numpy",
    "se_kernel_matrix_numba",
    "USE_NUMBA",
]


def _segment_boxes(rows, cols, radius, height, width):
    """Pixel bounding boxes (r0, r1, c0, c1), half-open, one per segment."""
    if rows.size == 1:
        rows = np.repeat(rows, 2)
        cols = np.repeat(cols, 2)
    ar, br = rows[:-1], rows[1:]
    ac, bc = cols[:-1], cols[1:]
    r0 = np.clip(np.floor(np.minimum(ar, br) - radius), 0, height).astype(np.int64)
    r1 = np.clip(np.ceil(np.maximum(ar, br) + radius) + 1, 0, height).astype(np.int64)
    c0 = np.clip(np.floor(np.minimum(ac, bc) - radius), 0, width).astype(np.int64)
    c1 = np.clip(np.ceil(np.maximum(ac, bc) + radius) + 1, 0, width).astype(np.int64)
    return rows, cols, r0, r1, c0, c1


def render_capsules_numpy(rows, cols, radius, height, width):
    """Rasterize the union of capsules along a polyline.

    Parameters
    ----------
    rows, cols : (K,) float arrays
        Pixel coordinates of the chain points (pixel centres sit on integers).
    radius : float
        Capsule half-width in pixels. A pixel is set when its centre lies
        within ``radius`` of some segment (closed test).
    height, width : int
        Output shape.

    Returns
    -------
    (height, width) uint8 array of 0/1.
    """
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    out = np.zeros((height, width), dtype=np.uint8)
    if rows.size == 0:
        return out
    rows, cols, r0, r1, c0, c1 = _segment_boxes(rows, cols, radius, height, width)
    r2 = radius * radius
    for s in range(rows.size - 1):
        if r1[s] <= r0[s] or c1[s] <= c0[s]:
            continue
        ar, ac = rows[s], cols[s]
        dr = rows[s + 1] - ar
        dc = cols[s + 1] - ac
        seg2 = dr * dr + dc * dc
        pr = np.arange(r0[s], r1[s], dtype=np.float64)[:, None]
        pc = np.arange(c0[s], c1[s], dtype=np.float64)[None, :]
        if seg2 > 0.0:
            t = ((pr - ar) * dr + (pc - ac) * dc) / seg2
            t = np.minimum(np.maximum(t, 0.0), 1.0)
        else:
            t = np.zeros((pr.shape[0], pc.shape[1]))
        er = pr - (ar + t * dr)
        ec = pc - (ac + t * dc)
        hit = er * er + ec * ec <= r2
        out[r0[s]:r1[s], c0[s]:c1[s]] |= hit.astype(np.uint8)
    return out


@njit
def _render_capsules_jit(rows, cols, r0, r1, c0, c1, r2, out):
    for s in range(rows.size - 1):
        ar = rows[s]
        ac = cols[s]
        dr = rows[s + 1] - ar
        dc = cols[s + 1] - ac
        seg2 = dr * dr + dc * dc
        for i in range(r0[s], r1[s]):
            pr = float(i)
            for j in range(c0[s], c1[s]):
                if out[i, j]:
                    continue
                pc = float(j)
                t = 0.0
                if seg2 > 0.0:
                    t = ((pr - ar) * dr + (pc - ac) * dc) / seg2
                    t = min(max(t, 0.0), 1.0)
                er = pr - (ar + t * dr)
                ec = pc - (ac + t * dc)
                if er * er + ec * ec <= r2:
                    out[i, j] = 1


def render_capsules_numba(rows, cols, radius, height, width):
    """Numba twin of :func:`render_capsules_numpy`."""
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    out = np.zeros((height, width), dtype=np.uint8)
    if rows.size == 0:
        return out
    rows, cols, r0, r1, c0, c1 = _segment_boxes(rows, cols, radius, height, width)
    _render_capsules_jit(rows, cols, r0, r1, c0, c1, float(radius) * float(radius), out)
    return out


def se_kernel_matrix_numpy(t1, t2, signal_std, length_scale):
    """Squared-exponential covariance between two sets of frame indices."""
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    d = t1[:, None] - t2[None, :]
    return signal_std**2 * np.exp(-(d * d) / (2.0 * length_scale**2))


@njit
def _se_kernel_jit(t1, t2, s2, inv2l2, out):
    for i in range(t1.size):
        for j in range(t2.size):
            d = t1[i] - t2[j]
            out[i, j] = s2 * math.exp(-(d * d) * inv2l2)


def se_kernel_matrix_numba(t1, t2, signal_std, length_scale):
    t1 = np.ascontiguousarray(t1, dtype=np.float64)
    t2 = np.ascontiguousarray(t2, dtype=np.float64)
    out = np.empty((t1.size, t2.size))
    _se_kernel_jit(t1, t2, float(signal_std) ** 2, 1.0 / (2.0 * float(length_scale) ** 2), out)
    return out


if USE_NUMBA:
    render_capsules = render_capsules_numba
    se_kernel_matrix = se_kernel_matrix_numba
else:
    render_capsules = render_capsules_numpy
    se_kernel_matrix = se_kernel_matrix_numpy

if not HAVE_NUMBA:  # pragma: no cover
    render_capsules_numba = render_capsules_numpy
    se_kernel_matrix_numba = se_kernel_matrix_numpy
