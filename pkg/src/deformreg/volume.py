"""Volume containers and file I/O.

Two on-disk formats are supported:

``raw``
    ``<stem>.raw`` holds the voxel payload, little-endian, x-fastest;
    ``<stem>.json`` holds ``{"dims", "spacing", "dtype", "intensity_range"}``
    and optionally ``"normalize": true``. The payload is float32 unless the
    data cannot be represented in float32 exactly, in which case float64 is
    written and recorded as ``"dtype": "<f8"``.

``nifti1``
    Single-file uncompressed NIfTI-1 (magic ``n+1``), float32 or int16
    data, no extensions, ``vox_offset`` 352.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, ShapeError


def _as_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ShapeError(f"dims must be three positive integers, got {dims}")
    return dims


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar intensity grid indexed ``data[x, y, z]`` with spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeError(f"volume data must be 3D, got shape {data.shape}")
        _as_dims(data.shape)
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains NaN or Inf")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @classmethod
    def from_linear(cls, values, dims, spacing=(1.0, 1.0, 1.0)):
        """Build from an x-fastest linear sequence."""
        dims = _as_dims(dims)
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != np.prod(dims):
            raise ShapeError(f"{values.size} values do not fill dims {dims}")
        return cls(values.reshape(dims, order="F"), spacing)

    @property
    def dims(self):
        return self.data.shape

    def linear(self):
        """Voxel values in x-fastest order."""
        return self.data.ravel(order="F")

    def with_data(self, data):
        return Volume3D(data, self.spacing)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Per-voxel non-negative integer labels; 0 is background."""

    data: np.ndarray
    labels: tuple = field(init=False)

    def __post_init__(self):
        data = np.array(self.data)
        if data.ndim != 3:
            raise ShapeError(f"mask must be 3D, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(data == np.round(data)):
                raise DataError("mask labels must be integers")
        data = data.astype(np.int32)
        if np.any(data < 0):
            raise DataError("mask labels must be non-negative")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", tuple(int(v) for v in np.unique(data) if v))

    @property
    def dims(self):
        return self.data.shape

    def check_matches(self, vol):
        if tuple(self.dims) != tuple(np.shape(vol)):
            raise ShapeError(f"mask dims {self.dims} do not match volume {np.shape(vol)}")

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)


def like(template, data):
    """Wrap ``data`` the same way ``template`` is wrapped (Volume3D or ndarray)."""
    if isinstance(template, Volume3D):
        return Volume3D(data, template.spacing)
    return data


# ---------------------------------------------------------------------------
# normalization / slice export


def normalize_intensity(vol):
    """Affine rescale to [0, 1]; constant input maps to zeros."""
    a = np.asarray(vol, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return like(vol, np.zeros_like(a))
    if lo == 0.0 and hi == 1.0:
        return like(vol, a.copy())
    return like(vol, (a - lo) / (hi - lo))


def _slice(a, axis, index):
    ax = {"x": 0, "y": 1, "z": 2}.get(axis, axis)
    if ax not in (0, 1, 2):
        raise ValueError(f"axis must be x, y or z, got {axis!r}")
    n = a.shape[ax]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range [0, {n}) along axis {axis}")
    return np.take(a, index, axis=ax)


def slice_to_uint8(vol, axis, index):
    """8-bit rendering of one slice, windowed to the slice's own [min, max].

    The result is indexed ``[row, col]`` with the first remaining volume axis
    running along columns (so an x-ramp on a z-slice increases along rows).
    """
    s = _slice(np.asarray(vol, dtype=np.float64), axis, index).T
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.full(s.shape, 128, dtype=np.uint8)
    return np.round(255.0 * (s - lo) / (hi - lo)).astype(np.uint8)


def export_slice(vol, axis, index, path):
    """Write a slice as 8-bit grayscale; ``.png`` via Pillow, anything else as binary PGM."""
    img = slice_to_uint8(vol, axis, index)
    path = os.fspath(path)
    if path.lower().endswith(".png"):
        from PIL import Image

        Image.fromarray(img, mode="L").save(path)
        return
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError("only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# raw + JSON sidecar


def _raw_paths(path):
    stem, ext = os.path.splitext(os.fspath(path))
    if ext.lower() not in (".raw", ".json"):
        stem = os.fspath(path)
    return stem + ".raw", stem + ".json"


def _payload_dtype(a):
    return "<f4" if np.array_equal(a.astype(np.float32), a) else "<f8"


def write_raw_array(a, path, header):
    """Write an x-fastest payload plus sidecar; ``header`` gets ``dtype`` added."""
    payload, sidecar = _raw_paths(path)
    dtype = _payload_dtype(a)
    header = dict(header, dtype=dtype)
    with open(payload, "wb") as f:
        f.write(np.asarray(a, dtype=dtype).ravel(order="F").tobytes())
    with open(sidecar, "w") as f:
        json.dump(header, f, indent=2)


def read_raw_array(path, n_components=1):
    """Return ``(array, header)``; components are stacked on a leading axis."""
    payload, sidecar = _raw_paths(path)
    with open(sidecar) as f:
        header = json.load(f)
    try:
        dims = _as_dims(header["dims"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"sidecar {sidecar} lacks valid dims") from exc
    dtype = np.dtype(header.get("dtype", "<f4"))
    if dtype.str not in ("<f4", "<f8"):
        raise FormatError(f"unsupported raw dtype {dtype.str}")
    with open(payload, "rb") as f:
        blob = f.read()
    expected = int(np.prod(dims)) * n_components
    if len(blob) != expected * dtype.itemsize:
        raise FormatError(
            f"payload holds {len(blob) // dtype.itemsize} values, header needs {expected}"
        )
    flat = np.frombuffer(blob, dtype=dtype).astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise DataError(f"{payload} contains NaN or Inf")
    if n_components == 1:
        return flat.reshape(dims, order="F"), header
    return flat.reshape((*dims, n_components), order="F").transpose(3, 0, 1, 2), header


# ---------------------------------------------------------------------------
# NIfTI-1 (minimal single-file subset)

_NIFTI_FLOAT32 = 16
_NIFTI_INT16 = 4
_NIFTI_HDR = 348
_NIFTI_OFFSET = 352


def _write_nifti(vol, path):
    a = np.asarray(vol.data)
    nx, ny, nz = a.shape
    hdr = bytearray(_NIFTI_HDR)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, _NIFTI_FLOAT32, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_NIFTI_OFFSET))
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    hdr[344:348] = b"n+1\x00"
    with open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00\x00\x00\x00")
        f.write(a.astype("<f4").ravel(order="F").tobytes())


def _read_nifti(path, normalize):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _NIFTI_HDR:
        raise FormatError(f"{path}: truncated NIfTI header")
    if struct.unpack_from("<i", blob, 0)[0] == _NIFTI_HDR:
        end = "<"
    elif struct.unpack_from(">i", blob, 0)[0] == _NIFTI_HDR:
        end = ">"
    else:
        raise FormatError(f"{path}: bad sizeof_hdr")
    if blob[344:347] != b"n+1":
        raise FormatError(f"{path}: only single-file n+1 NIfTI is supported")
    dim = struct.unpack_from(end + "8h", blob, 40)
    if dim[0] < 3 or any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise FormatError(f"{path}: expected a 3D volume, dim={dim}")
    dims = _as_dims(dim[1:4])
    datatype = struct.unpack_from(end + "h", blob, 70)[0]
    pixdim = struct.unpack_from(end + "8f", blob, 76)
    offset = int(struct.unpack_from(end + "f", blob, 108)[0])
    slope, inter = struct.unpack_from(end + "ff", blob, 112)
    if datatype == _NIFTI_FLOAT32:
        dtype = np.dtype(end + "f4")
    elif datatype == _NIFTI_INT16:
        dtype = np.dtype(end + "i2")
    else:
        raise FormatError(f"{path}: unsupported NIfTI datatype {datatype}")
    n = int(np.prod(dims))
    payload = blob[offset : offset + n * dtype.itemsize]
    if len(payload) != n * dtype.itemsize:
        raise FormatError(f"{path}: payload shorter than dims {dims}")
    flat = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    if slope not in (0.0, 1.0) or inter != 0.0:
        flat = flat * (slope or 1.0) + inter
    if not np.all(np.isfinite(flat)):
        raise DataError(f"{path} contains NaN or Inf")
    spacing = tuple(float(s) if s > 0 else 1.0 for s in pixdim[1:4])
    vol = Volume3D(flat.reshape(dims, order="F"), spacing)
    if normalize is None:
        normalize = datatype == _NIFTI_INT16
    return normalize_intensity(vol) if normalize else vol


def _infer_format(path):
    p = os.fspath(path).lower()
    if p.endswith(".nii"):
        return "nifti1"
    if p.endswith(".nii.gz"):
        raise FormatError("compressed NIfTI is not supported")
    return "raw"


def load_volume(path, format=None, normalize=None):
    """Load a volume.

    ``normalize=None`` defers to the file: the raw sidecar's ``"normalize"``
    flag, or for NIfTI, whether the payload is an integer type.
    """
    format = format or _infer_format(path)
    if format == "nifti1":
        return _read_nifti(os.fspath(path), normalize)
    if format != "raw":
        raise FormatError(f"unknown volume format {format!r}")
    data, header = read_raw_array(path)
    vol = Volume3D(data, tuple(header.get("spacing", (1.0, 1.0, 1.0))))
    if normalize is None:
        normalize = bool(header.get("normalize", False))
    return normalize_intensity(vol) if normalize else vol


def save_volume(vol, path, format=None):
    if not isinstance(vol, Volume3D):
        vol = Volume3D(vol)
    format = format or _infer_format(path)
    if format == "nifti1":
        _write_nifti(vol, os.fspath(path))
    elif format == "raw":
        a = vol.data
        write_raw_array(
            a,
            path,
            {
                "dims": list(vol.dims),
                "spacing": list(vol.spacing),
                "intensity_range": [float(a.min()), float(a.max())],
            },
        )
    else:
        raise FormatError(f"unknown volume format {format!r}")


def save_mask(mask, path):
    a = np.asarray(mask)
    write_raw_array(a.astype(np.float64), path, {"dims": list(a.shape), "kind": "label_mask"})


def load_mask(path):
    data, _ = read_raw_array(path)
    return LabelMask(np.round(data).astype(np.int32))
