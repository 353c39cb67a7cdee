"""Dense displacement fields and trilinear warping.

A field stores one 3-vector per voxel in voxel units, as an array of shape
``(3, nx, ny, nz)``. Warping samples the source at ``p + u(p)``; samples
that fall outside the grid take the nearest edge value.
"""

from dataclasses import dataclass

import numpy as np

from . import _ops
from .errors import ShapeError
from .volume import like, read_raw_array, write_raw_array


class DisplacementField:
    """Per-voxel displacement ``u(p)``; the warped location is ``p + u(p)``."""

    convention = "p_plus_u"
    units = "voxel"

    def __init__(self, vectors):
        v = np.array(vectors, dtype=np.float64)
        if v.ndim != 4 or v.shape[0] != 3:
            raise ShapeError(f"field vectors must have shape (3, nx, ny, nz), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("displacement field contains NaN or Inf")
        self.vectors = v

    @classmethod
    def zeros(cls, dims):
        return cls(np.zeros((3, *dims)))

    @property
    def dims(self):
        return self.vectors.shape[1:]

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.vectors
        return self.vectors.astype(dtype)

    def __repr__(self):
        return f"DisplacementField(dims={self.dims}, max|u|={np.abs(self.vectors).max():.3g})"


def _field(phi):
    u = np.asarray(phi, dtype=np.float64)
    if u.ndim != 4 or u.shape[0] != 3:
        raise ShapeError(f"expected a field of shape (3, nx, ny, nz), got {u.shape}")
    return u


def _check_pair(vol, u):
    if tuple(np.shape(vol)) != tuple(u.shape[1:]):
        raise ShapeError(f"volume dims {np.shape(vol)} do not match field dims {u.shape[1:]}")


def identity_grid(dims):
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij"))


def _cells(coords, dims):
    """Per-axis lower corner index, fractional weight, and in-domain mask."""
    out = []
    for c, n in zip(coords, dims):
        cc = np.clip(c, 0.0, n - 1.0)
        i0 = np.minimum(np.floor(cc).astype(np.intp), n - 2)
        out.append((i0, cc - i0, (c >= 0.0) & (c < n - 1.0)))
    return out


def sample(a, coords, with_gradient=False):
    """Trilinear, edge-clamped sample of ``a`` at absolute ``coords`` (3, ...).

    With ``with_gradient`` also returns d(sample)/d(coords), zero along an
    axis where the coordinate was clamped.
    """
    a = np.asarray(a, dtype=np.float64)
    if min(a.shape) < 2:
        raise ShapeError("trilinear sampling needs at least 2 voxels per axis")
    (ix, fx, mx), (iy, fy, my), (iz, fz, mz) = _cells(coords, a.shape)
    c000 = a[ix, iy, iz]
    c100 = a[ix + 1, iy, iz]
    c010 = a[ix, iy + 1, iz]
    c110 = a[ix + 1, iy + 1, iz]
    c001 = a[ix, iy, iz + 1]
    c101 = a[ix + 1, iy, iz + 1]
    c011 = a[ix, iy + 1, iz + 1]
    c111 = a[ix + 1, iy + 1, iz + 1]
    # collapse x, then y, then z
    c00 = c000 + fx * (c100 - c000)
    c10 = c010 + fx * (c110 - c010)
    c01 = c001 + fx * (c101 - c001)
    c11 = c011 + fx * (c111 - c011)
    c0 = c00 + fy * (c10 - c00)
    c1 = c01 + fy * (c11 - c01)
    val = c0 + fz * (c1 - c0)
    if not with_gradient:
        return val
    dz = (c1 - c0) * mz
    dy = ((1 - fz) * (c10 - c00) + fz * (c11 - c01)) * my
    d0 = (1 - fy) * (c100 - c000) + fy * (c110 - c010)
    d1 = (1 - fy) * (c101 - c001) + fy * (c111 - c011)
    dx = ((1 - fz) * d0 + fz * d1) * mx
    return val, np.stack([dx, dy, dz])


def warp(vol, phi):
    """Resample ``vol`` at ``p + u(p)``; returns the same container type as ``vol``."""
    u = _field(phi)
    _check_pair(vol, u)
    if not np.any(u):
        return like(vol, np.array(vol, dtype=np.float64))
    out = sample(vol, identity_grid(u.shape[1:]) + u)
    return like(vol, out)


def warp_gradient(vol, phi, upstream):
    """Given dL/d(warped) per voxel, return dL/du with shape (3, nx, ny, nz)."""
    u = _field(phi)
    _check_pair(vol, u)
    upstream = np.asarray(upstream, dtype=np.float64)
    _check_pair(upstream, u)
    _, d = sample(vol, identity_grid(u.shape[1:]) + u, with_gradient=True)
    return d * upstream


def warp_nearest(labels, phi):
    """Nearest-neighbour warp for categorical volumes (label masks)."""
    u = _field(phi)
    a = np.asarray(labels)
    _check_pair(a, u)
    coords = identity_grid(u.shape[1:]) + u
    idx = [np.clip(np.floor(c + 0.5).astype(np.intp), 0, n - 1) for c, n in zip(coords, a.shape)]
    return a[tuple(idx)]


def smoothness_loss(phi):
    """Sum of squared forward differences of every component; returns (value, grad)."""
    u = _field(phi)
    if min(u.shape[1:]) < 2:
        raise ShapeError("smoothness needs at least 2 voxels per axis")
    value = 0.0
    grad = np.zeros_like(u)
    for c in range(3):
        for axis in range(3):
            d = _ops.forward_diff(u[c], axis)
            value += float(np.sum(d * d))
            grad[c] += 2.0 * _ops.forward_diff_adjoint(d, axis)
    return value, grad


@dataclass(frozen=True)
class JacobianStats:
    min_det: float
    mean_det: float
    fraction_nonpositive: float


def jacobian_determinant(phi):
    """det(I + grad u) per voxel; central differences inside, one-sided on borders."""
    u = _field(phi)
    if min(u.shape[1:]) < 2:
        raise ShapeError("jacobian needs at least 2 voxels per axis")
    jac = np.empty(u.shape[1:] + (3, 3))
    for c in range(3):
        for axis in range(3):
            jac[..., c, axis] = _ops.central_diff(u[c], axis) + (c == axis)
    return np.linalg.det(jac)


def jacobian_stats(phi):
    det = jacobian_determinant(phi)
    return JacobianStats(
        min_det=float(det.min()),
        mean_det=float(det.mean()),
        fraction_nonpositive=float(np.mean(det <= 0)),
    )


def compose(outer, inner):
    """Field ``r`` with ``p + r(p) = q + outer(q)``, ``q = p + inner(p)``.

    ``warp(F, compose(a, b))`` approximates ``warp(warp(F, a), b)``.
    """
    a, b = _field(outer), _field(inner)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compose fields of dims {a.shape[1:]} and {b.shape[1:]}")
    if not np.any(b):
        return DisplacementField(a)
    q = identity_grid(b.shape[1:]) + b
    return DisplacementField(b + np.stack([sample(a[c], q) for c in range(3)]))


def upsample_field(phi, new_dims):
    """Trilinear resize with voxel-centre alignment; vectors rescale by new/old per axis."""
    u = _field(phi)
    old = u.shape[1:]
    new_dims = tuple(int(n) for n in new_dims)
    if len(new_dims) != 3 or any(n < o for n, o in zip(new_dims, old)):
        raise ShapeError(f"cannot upsample field from {old} to {new_dims}")
    scale = np.array(new_dims, dtype=np.float64) / np.array(old)
    if new_dims == tuple(old):
        return DisplacementField(u)
    grid = identity_grid(new_dims)
    coords = (grid + 0.5) / scale[:, None, None, None] - 0.5
    return DisplacementField(np.stack([scale[c] * sample(u[c], coords) for c in range(3)]))


def save_field(phi, path):
    u = _field(phi)
    write_raw_array(
        # components stacked last so the payload is x, y, z planes in x-fastest order
        np.moveaxis(u, 0, -1),
        path,
        {"dims": list(u.shape[1:]), "convention": "p_plus_u", "units": "voxel", "components": 3},
    )


def load_field(path):
    data, header = read_raw_array(path, n_components=3)
    if header.get("convention", "p_plus_u") != "p_plus_u":
        raise ValueError(f"unsupported field convention {header['convention']!r}")
    return DisplacementField(data)
