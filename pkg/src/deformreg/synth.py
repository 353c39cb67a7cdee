"""Synthetic registration pairs with known ground-truth fields.

A pair is built from a procedural phantom ``P`` with label mask ``M``:

* ``gt``  = random smooth deformation (affine + elastic),
* ``R``   = ``warp(P, gt)``, ``mask_R = warp_nearest(M, gt)``,
* ``F``   = ``remap_modality(P)``, ``mask_F = M``.

so that ``warp(F, gt)`` is ``F`` aligned to ``R`` and ``gt`` is directly the
field a registration should recover.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import _ops
from .errors import ConfigError
from .field import DisplacementField, identity_grid, warp, warp_nearest
from .volume import LabelMask, Volume3D


@dataclass(frozen=True)
class SyntheticDeformSpec:
    """Bounds of a random deformation.

    With ``randomize`` each shift/rotation component is drawn uniformly from
    ``[-bound, bound]``; without it the bounds are used as exact values. The
    isotropic scale is drawn from ``scale`` either way, and the elastic part
    is always seeded noise.
    """

    shift: tuple = (3.0, 3.0, 3.0)
    rotation_deg: tuple = (3.0, 3.0, 3.0)
    scale: tuple = (0.97, 1.03)
    elastic_amplitude: float = 1.5
    elastic_sigma: float = 6.0
    seed: int = 0
    randomize: bool = True

    def __post_init__(self):
        lo, hi = self.scale
        if not 0 < lo <= hi:
            raise ConfigError(f"scale range must satisfy 0 < lo <= hi, got {self.scale}")
        if self.elastic_amplitude < 0:
            raise ConfigError("elastic amplitude must be non-negative")
        if self.elastic_sigma <= 0:
            raise ConfigError("elastic sigma must be positive")

    @classmethod
    def none(cls, seed=0):
        """A spec that generates the zero field."""
        return cls((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (1.0, 1.0), 0.0, 1.0, seed, False)


@dataclass(frozen=True)
class ModalityRemapSpec:
    """Piecewise-linear intensity remap, then blur, then additive noise."""

    knots: tuple = ((0.0, 0.2), (0.4, 0.9), (1.0, 0.1))
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        x = np.array([k[0] for k in self.knots], dtype=np.float64)
        if x.size < 2 or np.any(np.diff(x) <= 0) or x[0] != 0.0 or x[-1] != 1.0:
            raise ConfigError("remap knot inputs must increase strictly from 0 to 1")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ConfigError("noise and blur sigmas must be non-negative")

    @classmethod
    def identity(cls, seed=0):
        return cls(((0.0, 0.0), (1.0, 1.0)), 0.0, 0.0, seed)


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple
    radii: tuple
    intensity: float

    def inside(self, grid):
        r = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, self.center, self.radii))
        return r <= 1.0

    @property
    def volume(self):
        return 4.0 / 3.0 * np.pi * float(np.prod(self.radii))


def _rotation(angles_deg):
    ax, ay, az = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def affine_parameters(spec):
    """Draw ``(shift, rotation_deg, scale)`` for ``spec`` (same rng stream as the field)."""
    rng = np.random.default_rng(spec.seed)
    shift = np.asarray(spec.shift, dtype=np.float64)
    rot = np.asarray(spec.rotation_deg, dtype=np.float64)
    if spec.randomize:
        shift = rng.uniform(-1.0, 1.0, 3) * shift
        rot = rng.uniform(-1.0, 1.0, 3) * rot
    scale = rng.uniform(*spec.scale)
    return shift, rot, scale, rng


def generate_deformation(spec, dims):
    """Affine part about the volume centre plus rescaled smooth noise."""
    dims = tuple(int(d) for d in dims)
    if min(dims) < 8:
        raise ConfigError("deformation grids need at least 8 voxels per axis")
    if spec.elastic_amplitude > min(dims) / 4:
        raise ConfigError(
            f"elastic amplitude {spec.elastic_amplitude} exceeds a quarter of the grid {dims}"
        )
    shift, rot, scale, rng = affine_parameters(spec)
    grid = identity_grid(dims)
    centre = (np.array(dims, dtype=np.float64) - 1.0) / 2.0
    rel = grid - centre[:, None, None, None]
    a = scale * _rotation(rot)
    u = np.einsum("ij,j...->i...", a - np.eye(3), rel) + shift[:, None, None, None]
    if spec.elastic_amplitude > 0:
        noise = np.stack(
            [_ops.gaussian_like_blur(rng.standard_normal(dims), spec.elastic_sigma) for _ in range(3)]
        )
        peak = np.abs(noise).max()
        if peak > 0:
            u = u + noise * (spec.elastic_amplitude / peak)
    return DisplacementField(u)


# background first, then shells from the outside in; neighbouring layers
# alternate across the middle of the range so no contrast ordering is shared
# between modalities under a folded remap
SHELL_LEVELS = (0.0, 0.3, 0.75, 0.1, 0.65, 0.2)
SHELL_RADII = (0.48, 0.39, 0.30, 0.21, 0.12)


def random_blobs(dims, n_blobs, rng):
    dims = np.asarray(dims, dtype=np.float64)
    # mid-range inclusions keep their edges off the extremes of the shell palette
    levels = rng.permutation(np.linspace(0.45, 0.55, n_blobs)) if n_blobs else []
    blobs = []
    for level in levels:
        centre = rng.uniform(0.35, 0.65, 3) * (dims - 1)
        radii = rng.uniform(0.06, 0.12, 3) * dims
        blobs.append(Ellipsoid(tuple(centre), tuple(radii), float(level)))
    return blobs


def make_phantom(dims, n_blobs=2, seed=0, blobs=None, texture=0.03, anisotropy=(1.0, 0.85, 0.7),
                 edge_sigma=0.8):
    """Layered head-like phantom with ellipsoidal inclusions.

    Concentric shells of alternating intensity with radii given as fractions
    of each axis times ``anisotropy`` (unequal semi-axes make motion along a
    shell observable), faint smooth texture
    inside the head, then ``n_blobs`` inclusions. Later blobs overwrite
    earlier ones; the mask labels blob ``k`` (1-based) where it is visible.
    The volume is blurred by one box pass of about ``edge_sigma`` and
    normalized to [0, 1]; the mask is not blurred. Softer edges make the
    intensity relation across an edge closer to affine, which hides the
    non-monotone part of a remap from windowed correlation.
    """
    dims = tuple(int(d) for d in dims)
    if min(dims) < 16:
        raise ConfigError("phantoms need at least 16 voxels per axis")
    rng = np.random.default_rng(seed)
    grid = identity_grid(dims)
    size = np.array(dims, dtype=np.float64)
    centre = (size - 1) / 2 + rng.uniform(-1.0, 1.0, 3)
    rel = (grid - centre[:, None, None, None]) / (size * np.asarray(anisotropy))[:, None, None, None]
    radius = np.sqrt(np.sum(rel * rel, axis=0))
    data = np.full(dims, SHELL_LEVELS[0])
    for level, r in zip(SHELL_LEVELS[1:], SHELL_RADII):
        data = np.where(radius <= r, level, data)
    if texture > 0:
        tex = _ops.gaussian_like_blur(rng.standard_normal(dims), 1.5)
        data = data + texture * (tex / np.abs(tex).max()) * (radius <= SHELL_RADII[0])
    mask = np.zeros(dims, dtype=np.int32)
    if blobs is None:
        blobs = random_blobs(dims, n_blobs, rng)
    for k, blob in enumerate(blobs, start=1):
        inside = blob.inside(grid)
        data = np.where(inside, blob.intensity, data)
        mask[inside] = k
    data = _ops.gaussian_like_blur(data, edge_sigma, passes=1)
    lo, hi = data.min(), data.max()
    data = (data - lo) / (hi - lo) if hi > lo else np.zeros(dims)
    return Volume3D(data), LabelMask(mask)


def remap_modality(vol, spec):
    """Piecewise-linear remap, blur, additive Gaussian noise, clamp to [0, 1]."""
    a = np.asarray(vol, dtype=np.float64)
    xs = np.array([k[0] for k in spec.knots], dtype=np.float64)
    ys = np.array([k[1] for k in spec.knots], dtype=np.float64)
    out = np.interp(a, xs, ys)
    if spec.blur_sigma > 0:
        out = _ops.gaussian_like_blur(out, spec.blur_sigma)
    if spec.noise_sigma > 0:
        out = out + np.random.default_rng(spec.seed).normal(0.0, spec.noise_sigma, a.shape)
    out = np.clip(out, 0.0, 1.0)
    return Volume3D(out, vol.spacing) if isinstance(vol, Volume3D) else out


@dataclass
class SyntheticPair:
    ref: Volume3D
    flo: Volume3D
    gt: DisplacementField
    mask_ref: LabelMask
    mask_flo: LabelMask
    phantom: Volume3D = None
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.ref, self.flo, self.gt, self.mask_ref, self.mask_flo))


def make_pair(dims, deform_spec=None, remap_spec=None, seed=0, n_blobs=2):
    deform_spec = deform_spec or SyntheticDeformSpec(seed=seed)
    remap_spec = remap_spec or ModalityRemapSpec(seed=seed)
    phantom, mask = make_phantom(dims, n_blobs, seed)
    gt = generate_deformation(deform_spec, dims)
    ref = warp(phantom, gt)
    mask_ref = LabelMask(warp_nearest(mask, gt))
    flo = remap_modality(phantom, remap_spec)
    meta = {
        "dims": list(dims),
        "seed": seed,
        "n_blobs": n_blobs,
        "deform_spec": asdict(deform_spec),
        "remap_spec": asdict(remap_spec),
    }
    return SyntheticPair(ref, flo, gt, mask_ref, mask, phantom, meta)
