"""Minimal single-file NIfTI-1 reader/writer (.nii and .nii.gz).

Covers exactly what this package needs: 3D scalar volumes, 3D label maps
and 4D vector fields, stored little-endian with the standard 348-byte
header. Array index (i, j, k[, t]) maps to NIfTI dim[1..4]; data on disk
is Fortran-ordered per the NIfTI convention. Orientation (qform/sform)
is ignored on read and written as identity-free defaults.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI-1 datatype codes
_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
}
_CODES = {v: k for k, v in _DTYPES.items()}


class NiftiError(ValueError):
    """Raised for unreadable or unsupported NIfTI files."""


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path):
    """Read a .nii/.nii.gz file into a numpy array of shape dim[1..dim[0]].

    Applies scl_slope/scl_inter when present (result promoted to float32).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: file shorter than a NIfTI header")

    end = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise NiftiError(f"{path}: not a NIfTI-1 file (bad sizeof_hdr)")
        end = ">"

    magic = raw[344:348]
    if magic[:3] == b"ni1":
        raise NiftiError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")
    if magic[:3] != b"n+1":
        raise NiftiError(f"{path}: bad magic {magic!r}")

    dim = struct.unpack_from(end + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: invalid dim[0]={ndim}")
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    if any(d < 1 for d in shape):
        raise NiftiError(f"{path}: invalid shape {shape}")

    (datatype,) = struct.unpack_from(end + "h", raw, 70)
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    dtype = _DTYPES[datatype].newbyteorder(end)

    (vox_offset,) = struct.unpack_from(end + "f", raw, 108)
    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    slope, inter = struct.unpack_from(end + "2f", raw, 112)

    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiError(f"{path}: truncated data section")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F")
    if dtype.byteorder == ">" or (dtype.byteorder == "=" and end == ">"):
        data = data.astype(dtype.newbyteorder("="))

    if (slope not in (0.0, 1.0)) or inter != 0.0:
        s = slope if slope != 0.0 else 1.0
        data = data.astype(np.float32) * np.float32(s) + np.float32(inter)
    return np.ascontiguousarray(data)


def write_nifti(path, array):
    """Write a numpy array (1..7 dims) as a little-endian .nii/.nii.gz file."""
    array = np.asarray(array)
    base = np.dtype(array.dtype.str.lstrip("<>=|"))
    if base not in _CODES:
        raise NiftiError(f"unsupported dtype for NIfTI output: {array.dtype}")
    code = _CODES[base]

    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dim = [array.ndim] + list(array.shape) + [1] * (7 - array.ndim)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, array.dtype.itemsize * 8)
    pixdim = [1.0] * 8
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    # xyzt_units: mm (2)
    struct.pack_into("<b", hdr, 123, 2)
    hdr[344:348] = MAGIC

    payload = np.asfortranarray(array).astype(array.dtype.newbyteorder("<"), copy=False)
    with _open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(payload.tobytes(order="F"))
