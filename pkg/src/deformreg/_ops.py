"""Linear stencil operators on 3D arrays and their adjoints.

Arrays are indexed ``[x, y, z]``. Every operator here is linear, so the
loss gradients elsewhere in the package are assembled from these forward
maps and their transposes.
"""

import numpy as np


def central_diff(a, axis):
    """Central differences along ``axis``, one-sided on the two end planes."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[axis]
    if n < 2:
        raise ValueError("central_diff needs at least 2 samples along the axis")
    a = np.moveaxis(a, axis, 0)
    out = np.empty_like(a)
    out[1:-1] = 0.5 * (a[2:] - a[:-2])
    out[0] = a[1] - a[0]
    out[-1] = a[-1] - a[-2]
    return np.moveaxis(out, 0, axis)


def central_diff_adjoint(g, axis):
    """Transpose of :func:`central_diff`."""
    g = np.moveaxis(np.asarray(g, dtype=np.float64), axis, 0)
    out = np.zeros_like(g)
    n = g.shape[0]
    # interior rows: 0.5 * (a[i+1] - a[i-1])
    out[2:] += 0.5 * g[1:-1]
    out[:-2] -= 0.5 * g[1:-1]
    out[1] += g[0]
    out[0] -= g[0]
    out[n - 1] += g[n - 1]
    out[n - 2] -= g[n - 1]
    return np.moveaxis(out, 0, axis)


def forward_diff(a, axis):
    """Forward differences; the last plane along ``axis`` is zero."""
    a = np.moveaxis(np.asarray(a, dtype=np.float64), axis, 0)
    out = np.zeros_like(a)
    out[:-1] = a[1:] - a[:-1]
    return np.moveaxis(out, 0, axis)


def forward_diff_adjoint(g, axis):
    g = np.moveaxis(np.asarray(g, dtype=np.float64), axis, 0)
    out = np.zeros_like(g)
    out[1:] += g[:-1]
    out[:-1] -= g[:-1]
    return np.moveaxis(out, 0, axis)


def _box_sum_axis(a, half, axis):
    # truncated window [i-half, i+half] clipped to the domain, via a padded cumsum
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    c = np.zeros((n + 1,) + a.shape[1:])
    np.cumsum(a, axis=0, out=c[1:])
    idx = np.arange(n)
    hi = np.minimum(idx + half + 1, n)
    lo = np.maximum(idx - half, 0)
    return np.moveaxis(c[hi] - c[lo], 0, axis)


def box_sum(a, width):
    """Sum over the ``width``-cube centred at each voxel, truncated at borders.

    The operator is symmetric, so it is its own adjoint.
    """
    if width % 2 != 1:
        raise ValueError("box width must be odd")
    out = np.asarray(a, dtype=np.float64)
    half = width // 2
    for axis in range(out.ndim):
        out = _box_sum_axis(out, half, axis)
    return out


def box_count(shape, width):
    """Number of in-domain voxels in each truncated window."""
    half = width // 2
    counts = []
    for n in shape:
        idx = np.arange(n)
        counts.append(np.minimum(idx + half, n - 1) - np.maximum(idx - half, 0) + 1)
    return np.einsum("i,j,k->ijk", *counts).astype(np.float64)


def box_mean(a, width):
    a = np.asarray(a, dtype=np.float64)
    return box_sum(a, width) / box_count(a.shape, width)


def gaussian_like_blur(a, sigma, passes=3):
    """Approximate a Gaussian of std ``sigma`` by repeated truncated box means."""
    if sigma <= 0:
        return np.asarray(a, dtype=np.float64).copy()
    # n passes of a width-w box have variance n * (w^2 - 1) / 12
    w = int(round(np.sqrt(12.0 * sigma**2 / passes + 1.0)))
    if w % 2 == 0:
        w += 1
    w = max(w, 3)
    out = np.asarray(a, dtype=np.float64)
    for _ in range(passes):
        out = box_mean(out, w)
    return out
