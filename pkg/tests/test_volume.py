import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from deformreg.errors import DataError, FormatError, ShapeError
from deformreg.volume import (
    LabelMask,
    Volume3D,
    export_slice,
    load_mask,
    load_volume,
    normalize_intensity,
    read_pgm,
    save_mask,
    save_volume,
    slice_to_uint8,
)


def test_linear_order_is_x_fastest():
    v = Volume3D.from_linear(np.arange(24), (2, 3, 4))
    assert v.data[1, 0, 0] == 1 and v.data[0, 1, 0] == 2 and v.data[0, 0, 1] == 6
    assert np.array_equal(v.linear(), np.arange(24))


def test_volume_rejects_nan_and_bad_shape():
    with pytest.raises(DataError):
        Volume3D(np.full((2, 2, 2), np.nan))
    with pytest.raises(ShapeError):
        Volume3D(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        Volume3D.from_linear(np.zeros(7), (2, 2, 2))


def test_volume_is_read_only():
    v = Volume3D(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_mask_validation():
    m = LabelMask(np.array([[[0, 2], [1, 2]]]))
    assert m.labels == (1, 2)
    with pytest.raises(DataError):
        LabelMask(np.full((1, 1, 2), -1))
    with pytest.raises(DataError):
        LabelMask(np.full((1, 1, 2), 0.5))
    with pytest.raises(ShapeError):
        m.check_matches(np.zeros((2, 2, 2)))


def test_normalize_intensity():
    out = normalize_intensity(np.array([[[2.0, 4.0], [6.0, 10.0]]]))
    assert np.allclose(out.ravel(), [0.0, 0.25, 0.5, 1.0])
    assert not np.any(normalize_intensity(np.full((2, 2, 2), 3.0)))


def test_raw_round_trip_float32_payload(tmp_path, rng):
    a = rng.random((4, 5, 6)).astype(np.float32).astype(np.float64)
    save_volume(Volume3D(a, (1.0, 2.0, 0.5)), tmp_path / "v.raw")
    header = json.loads((tmp_path / "v.json").read_text())
    assert header["dtype"] == "<f4" and header["dims"] == [4, 5, 6]
    assert (tmp_path / "v.raw").stat().st_size == 4 * a.size
    back = load_volume(tmp_path / "v.raw")
    assert np.array_equal(np.asarray(back), a) and back.spacing == (1.0, 2.0, 0.5)


def test_raw_promotes_to_float64_when_needed(tmp_path):
    a = np.full((2, 2, 2), 0.1)
    save_volume(a, tmp_path / "v.raw")
    assert json.loads((tmp_path / "v.json").read_text())["dtype"] == "<f8"
    assert np.array_equal(np.asarray(load_volume(tmp_path / "v.raw")), a)


def test_raw_payload_is_x_fastest(tmp_path):
    a = np.arange(8, dtype=float).reshape((2, 2, 2), order="F")
    save_volume(a, tmp_path / "v.raw")
    assert np.array_equal(np.fromfile(tmp_path / "v.raw", dtype="<f4"), np.arange(8))


def test_raw_size_mismatch_is_format_error(tmp_path):
    save_volume(np.zeros((2, 2, 2)), tmp_path / "v.raw")
    with open(tmp_path / "v.raw", "ab") as f:
        f.write(b"\x00" * 4)
    with pytest.raises(FormatError):
        load_volume(tmp_path / "v.raw")


def test_raw_normalize_flag(tmp_path):
    save_volume(np.array([[[2.0, 6.0]]]), tmp_path / "v.raw")
    header = json.loads((tmp_path / "v.json").read_text())
    header["normalize"] = True
    (tmp_path / "v.json").write_text(json.dumps(header))
    assert np.allclose(np.asarray(load_volume(tmp_path / "v.raw")).ravel(), [0.0, 1.0])


def test_nifti_round_trip(tmp_path, rng):
    a = rng.random((3, 4, 5)).astype(np.float32).astype(np.float64)
    save_volume(Volume3D(a, (0.5, 1.0, 2.0)), tmp_path / "v.nii")
    blob = (tmp_path / "v.nii").read_bytes()
    assert struct.unpack_from("<i", blob, 0)[0] == 348 and blob[344:347] == b"n+1"
    back = load_volume(tmp_path / "v.nii")
    assert np.array_equal(np.asarray(back), a) and back.spacing == (0.5, 1.0, 2.0)


def _int16_nifti(path, data):
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 4, 16)
    struct.pack_into("<8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    hdr[344:348] = b"n+1\x00"
    path.write_bytes(bytes(hdr) + b"\x00" * 4 + data.astype("<i2").ravel(order="F").tobytes())


def test_nifti_int16_is_normalized(tmp_path):
    _int16_nifti(tmp_path / "i.nii", np.array([[[0, 50], [100, 200]]]))
    out = np.asarray(load_volume(tmp_path / "i.nii"))
    assert np.allclose(out.ravel(order="F"), [0.0, 0.5, 0.25, 1.0])
    raw = np.asarray(load_volume(tmp_path / "i.nii", normalize=False))
    assert raw.max() == 200.0


def test_nifti_rejects_gz_and_garbage(tmp_path):
    with pytest.raises(FormatError):
        load_volume(tmp_path / "x.nii.gz")
    (tmp_path / "bad.nii").write_bytes(b"\x00" * 400)
    with pytest.raises(FormatError):
        load_volume(tmp_path / "bad.nii")


def test_mask_round_trip(tmp_path, rng):
    m = rng.integers(0, 5, (4, 4, 3))
    save_mask(m, tmp_path / "m.raw")
    back = load_mask(tmp_path / "m.raw")
    assert np.array_equal(np.asarray(back), m)


def test_slice_orientation_and_window(tmp_path):
    a = np.indices((4, 3, 2))[0].astype(float)
    img = slice_to_uint8(a, 2, 0)
    assert img.shape == (3, 4)
    assert img[0, 0] == 0 and img[0, 3] == 255
    assert np.all(slice_to_uint8(np.ones((2, 2, 2)), "x", 1) == 128)
    with pytest.raises(IndexError):
        slice_to_uint8(a, 2, 5)


def test_export_pgm_and_png(tmp_path):
    a = np.indices((4, 3, 2))[1].astype(float)
    export_slice(a, "z", 1, tmp_path / "s.pgm")
    assert np.array_equal(read_pgm(tmp_path / "s.pgm"), slice_to_uint8(a, 2, 1))
    export_slice(a, 2, 1, tmp_path / "s.png")
    from PIL import Image

    assert np.array_equal(np.array(Image.open(tmp_path / "s.png")), slice_to_uint8(a, 2, 1))


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(*[st.integers(1, 4)] * 3), elements=st.floats(-1e6, 1e6)))
def test_raw_round_trip_property(tmp_path_factory, a):
    path = tmp_path_factory.mktemp("v") / "v.raw"
    save_volume(a, path)
    assert np.array_equal(np.asarray(load_volume(path)), a)
