"""Volume data model, file I/O and preprocessing.

A volume is a float32 numpy array of shape (D, H, W); a label map is an
int32 array of the same shape (0 = background). Displacement fields are
(3, D, H, W) float32 arrays in memory and are persisted as 4D NIfTI with
the vector component on the last axis (x, y, z displacement in voxels of
the field's own grid).
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import nifti


def load_volume(path):
    """Load a single-channel 3D volume as float32, discarding orientation."""
    data = nifti.read_nifti(path)
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise ValueError(f"non-3D input: {path} has shape {data.shape}")
    return np.ascontiguousarray(data, dtype=np.float32)


def save_volume(path, volume):
    nifti.write_nifti(path, np.asarray(volume, dtype=np.float32))


def load_labels(path):
    """Load a 3D label map as int32."""
    data = nifti.read_nifti(path)
    if data.ndim != 3:
        raise ValueError(f"non-3D input: {path} has shape {data.shape}")
    return np.ascontiguousarray(np.rint(data).astype(np.int32))


def save_labels(path, labels):
    nifti.write_nifti(path, np.asarray(labels, dtype=np.int32))


def load_field(path):
    """Load a displacement field saved as 4D NIfTI (D, H, W, 3) -> (3, D, H, W)."""
    data = nifti.read_nifti(path)
    if data.ndim != 4 or data.shape[3] != 3:
        raise ValueError(f"not a displacement field: {path} has shape {data.shape}")
    return np.ascontiguousarray(np.moveaxis(data, 3, 0), dtype=np.float32)


def save_field(path, field):
    field = np.asarray(field, dtype=np.float32)
    if field.ndim != 4 or field.shape[0] != 3:
        raise ValueError(f"expected field of shape (3, D, H, W), got {field.shape}")
    nifti.write_nifti(path, np.moveaxis(field, 0, 3))


def normalize_intensity(volume):
    """Min-max rescale to [0, 1]; a constant volume maps to all zeros."""
    volume = np.asarray(volume, dtype=np.float32)
    if not np.all(np.isfinite(volume)):
        raise ValueError("volume contains non-finite values")
    lo = float(volume.min())
    hi = float(volume.max())
    if hi == lo:
        return np.zeros_like(volume)
    return (volume - lo) / np.float32(hi - lo)


def center_of_mass(volume):
    volume = np.asarray(volume)
    if volume.sum() <= 0:
        raise ValueError("volume has no positive mass")
    return np.asarray(ndimage.center_of_mass(volume), dtype=np.float64)


def com_shift(fixed, moving):
    """Integer voxel shift that moves `moving`'s center of mass onto `fixed`'s."""
    delta = center_of_mass(fixed) - center_of_mass(moving)
    return tuple(int(d) for d in np.rint(delta))


def shift_volume(volume, shift):
    """Translate by an integer voxel shift, filling vacated voxels with zero."""
    volume = np.asarray(volume)
    out = np.zeros_like(volume)
    src = []
    dst = []
    for size, s in zip(volume.shape, shift):
        s = int(s)
        if abs(s) >= size:
            return out
        src.append(slice(max(0, -s), size - max(0, s)))
        dst.append(slice(max(0, s), size + min(0, s)))
    out[tuple(dst)] = volume[tuple(src)]
    return out


def com_initialize(fixed, moving):
    """Shift `moving` by a rounded integer translation to match centers of mass."""
    return shift_volume(moving, com_shift(fixed, moving))


def crop_or_pad(volume, target):
    """Center-crop and/or zero-pad symmetrically to `target` shape.

    For odd size differences the extra voxel goes to the trailing side,
    consistently for crop and pad so the two operations invert each other
    on the interior.
    """
    volume = np.asarray(volume)
    target = tuple(int(t) for t in target)
    if len(target) != volume.ndim or any(t < 1 for t in target):
        raise ValueError(f"invalid target shape {target} for volume {volume.shape}")
    out = volume
    for axis, tgt in enumerate(target):
        cur = out.shape[axis]
        if tgt < cur:
            start = (cur - tgt) // 2
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(start, start + tgt)
            out = out[tuple(sl)]
        elif tgt > cur:
            before = (tgt - cur) // 2
            pad = [(0, 0)] * out.ndim
            pad[axis] = (before, tgt - cur - before)
            out = np.pad(out, pad)
    return np.ascontiguousarray(out)
