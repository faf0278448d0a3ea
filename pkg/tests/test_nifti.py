import gzip

import numpy as np
import pytest

from c2freg import nifti


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int16, np.int32, np.uint8])
@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_round_trip_bit_identical(tmp_path, dtype, suffix):
    rng = np.random.default_rng(0)
    if np.issubdtype(dtype, np.floating):
        arr = rng.standard_normal((4, 5, 6)).astype(dtype)
    else:
        arr = rng.integers(0, 100, size=(4, 5, 6)).astype(dtype)
    path = tmp_path / f"vol{suffix}"
    nifti.write_nifti(path, arr)
    back = nifti.read_nifti(path)
    assert back.dtype == arr.dtype
    assert np.array_equal(back, arr)


def test_round_trip_4d(tmp_path):
    arr = np.random.default_rng(1).standard_normal((3, 4, 5, 3)).astype(np.float32)
    path = tmp_path / "field.nii.gz"
    nifti.write_nifti(path, arr)
    back = nifti.read_nifti(path)
    assert back.shape == (3, 4, 5, 3)
    assert np.array_equal(back, arr)


def test_fortran_order_on_disk(tmp_path):
    # first index must vary fastest in the data section
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    path = tmp_path / "vol.nii"
    nifti.write_nifti(path, arr)
    raw = path.read_bytes()
    data = np.frombuffer(raw[nifti.VOX_OFFSET:], dtype="<f4")
    assert data[0] == arr[0, 0, 0]
    assert data[1] == arr[1, 0, 0]


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        nifti.read_nifti(tmp_path / "nope.nii")


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.nii"
    path.write_bytes(b"\x00" * 400)
    with pytest.raises(nifti.NiftiError):
        nifti.read_nifti(path)


def test_truncated_data(tmp_path):
    path = tmp_path / "ok.nii"
    nifti.write_nifti(path, np.zeros((4, 4, 4), dtype=np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(nifti.NiftiError):
        nifti.read_nifti(path)


def test_scl_slope_applied(tmp_path):
    path = tmp_path / "scaled.nii"
    nifti.write_nifti(path, np.arange(8, dtype=np.int16).reshape(2, 2, 2))
    raw = bytearray(path.read_bytes())
    import struct
    struct.pack_into("<2f", raw, 112, 2.0, 1.0)
    path.write_bytes(bytes(raw))
    back = nifti.read_nifti(path)
    assert back.dtype == np.float32
    assert np.allclose(back, np.arange(8).reshape(2, 2, 2) * 2.0 + 1.0)


def test_gzip_really_compressed(tmp_path):
    path = tmp_path / "vol.nii.gz"
    nifti.write_nifti(path, np.zeros((16, 16, 16), dtype=np.float32))
    with gzip.open(path, "rb") as f:
        f.read(16)  # must be a valid gzip stream
