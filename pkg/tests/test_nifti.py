"""Single-file NIfTI reader/writer round-trip and validation tests."""

import gzip
import struct

import numpy as np
import pytest

from vertseg.nifti import read_volume, write_volume
from vertseg.volume import GridGeometry, LabelVolume, ScalarVolume


def _scalar(seed=0):
    rng = np.random.default_rng(seed)
    geom = GridGeometry((7, 6, 5), (0.5, 0.75, 1.25), (-3.0, 2.0, 10.0))
    data = np.round(rng.normal(100, 300, geom.dims))
    return ScalarVolume(geom, data)


def _labels(seed=1):
    rng = np.random.default_rng(seed)
    geom = GridGeometry((7, 6, 5), (0.5, 0.75, 1.25), (-3.0, 2.0, 10.0))
    return LabelVolume(geom, rng.integers(0, 6, geom.dims))


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_scalar_round_trip(tmp_path, suffix):
    vol = _scalar()
    path = tmp_path / f"img{suffix}"
    write_volume(path, vol)
    back = read_volume(path)
    assert isinstance(back, ScalarVolume)
    assert back.geometry.dims == vol.geometry.dims
    assert np.allclose(back.geometry.spacing, vol.geometry.spacing,
                       atol=1e-6)
    assert np.allclose(back.geometry.origin, vol.geometry.origin, atol=1e-5)
    assert np.array_equal(back.data, vol.data)  # integral values survive


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_label_round_trip(tmp_path, suffix):
    vol = _labels()
    path = tmp_path / f"seg{suffix}"
    write_volume(path, vol)
    back = read_volume(path, kind="label")
    assert isinstance(back, LabelVolume)
    assert np.array_equal(back.data, vol.data)
    assert back.data.dtype.kind == "i"


def test_gz_file_really_compressed(tmp_path):
    path = tmp_path / "img.nii.gz"
    write_volume(path, _scalar())
    with open(path, "rb") as f:
        magic = f.read(2)
    assert magic == b"\x1f\x8b"
    # and transparently decompressed on read
    assert read_volume(path).geometry.dims == (7, 6, 5)


def test_write_rejects_out_of_range(tmp_path):
    geom = GridGeometry((2, 2, 2), (1, 1, 1), (0, 0, 0))
    big = ScalarVolume(geom, np.full((2, 2, 2), 1e6))
    with pytest.raises(ValueError):
        write_volume(tmp_path / "a.nii", big)
    lbl = LabelVolume(geom, np.full((2, 2, 2), 300))
    with pytest.raises(ValueError):
        write_volume(tmp_path / "b.nii", lbl)


def test_read_truncated_file(tmp_path):
    path = tmp_path / "short.nii"
    path.write_bytes(b"\x00" * 100)
    with pytest.raises(ValueError):
        read_volume(path)


def test_read_wrong_magic_size(tmp_path):
    path = tmp_path / "bad.nii"
    path.write_bytes(b"\x00" * 400)
    with pytest.raises(ValueError):
        read_volume(path)


def test_read_rejects_4d(tmp_path):
    path = tmp_path / "img.nii"
    write_volume(path, _scalar())
    raw = bytearray(path.read_bytes())
    struct.pack_into("<8h", raw, 40, 4, 7, 6, 5, 3, 1, 1, 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        read_volume(path)


def test_read_rejects_rotated_sform(tmp_path):
    path = tmp_path / "img.nii"
    write_volume(path, _scalar())
    raw = bytearray(path.read_bytes())
    srow = np.zeros((3, 4), dtype=np.float32)
    srow[0, 1] = 1.0  # off-diagonal rotation term
    srow[1, 0] = 1.0
    srow[2, 2] = 1.0
    struct.pack_into("<12f", raw, 280, *srow.ravel())
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        read_volume(path)


def test_read_applies_scl_slope(tmp_path):
    path = tmp_path / "img.nii"
    write_volume(path, _scalar())
    raw = bytearray(path.read_bytes())
    struct.pack_into("<2f", raw, 112, 2.0, 10.0)  # slope 2, intercept 10
    path.write_bytes(bytes(raw))
    scaled = read_volume(path)
    assert np.array_equal(scaled.data, 2.0 * _scalar().data + 10.0)


def test_axis_order_is_x_fastest(tmp_path):
    # a single bright voxel at index (1, 2, 3) must land at the NIfTI
    # offset x + nx*(y + ny*z)
    geom = GridGeometry((4, 5, 6), (1, 1, 1), (0, 0, 0))
    data = np.zeros((4, 5, 6))
    data[1, 2, 3] = 77.0
    path = tmp_path / "one.nii"
    write_volume(path, ScalarVolume(geom, data))
    raw = path.read_bytes()
    body = np.frombuffer(raw, dtype="<i2", offset=352)
    assert body[1 + 4 * (2 + 5 * 3)] == 77
    back = read_volume(path)
    assert back.data[1, 2, 3] == 77.0
    assert back.data.sum() == 77.0
