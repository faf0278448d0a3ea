"""Displacement-field and affine-transform algebra.

Conventions used throughout the package:

- A displacement field has shape (3, D, H, W) (optionally batched as
  (N, 3, D, H, W)); component c holds the displacement along array axis c,
  in voxels of the field's own grid. The transform maps voxel p to p + u(p).
- Affine transforms are 3x4 matrices [A | b] acting on voxel coordinates
  measured from the volume center ((D-1)/2, (H-1)/2, (W-1)/2).
- Functions accept numpy arrays or torch tensors and return the same kind;
  torch inputs keep autograd connectivity. Dtype is preserved, so oracle
  tests can run in float64.
- Warping samples out-of-bounds coordinates at the clamped boundary voxel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class AffineTransform:
    """3x4 matrix [A | b] on center-origin voxel coordinates."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 4):
            raise ValueError(f"affine matrix must be (3, 4), got {m.shape}")
        object.__setattr__(self, "matrix", m)

    @property
    def linear(self):
        return self.matrix[:, :3]

    @property
    def translation(self):
        return self.matrix[:, 3]

    @classmethod
    def identity(cls):
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]))

    @classmethod
    def from_components(cls, rotation=(0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0),
                        scale=(1.0, 1.0, 1.0)):
        """Rotation (radians, applied as Rx·Ry·Rz), then scale, plus translation."""
        rx, ry, rz = rotation
        cx, sx = np.cos(rx), np.sin(rx)
        cy, sy = np.cos(ry), np.sin(ry)
        cz, sz = np.cos(rz), np.sin(rz)
        mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        lin = mx @ my @ mz @ np.diag(np.asarray(scale, dtype=np.float64))
        return cls(np.hstack([lin, np.asarray(translation, dtype=np.float64).reshape(3, 1)]))

    def compose(self, other):
        """Transform equal to applying `other` first, then `self`."""
        lin = self.linear @ other.linear
        trans = self.linear @ other.translation + self.translation
        return AffineTransform(np.hstack([lin, trans.reshape(3, 1)]))

    def inverse(self):
        inv = np.linalg.inv(self.linear)
        return AffineTransform(np.hstack([inv, (-inv @ self.translation).reshape(3, 1)]))

    def save_txt(self, path):
        np.savetxt(path, self.matrix, fmt="%.17g")

    @classmethod
    def load_txt(cls, path):
        return cls(np.loadtxt(path).reshape(3, 4))


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x)), True


def _restore(x, was_numpy):
    return x.detach().cpu().numpy() if was_numpy else x


def _centered_grid(shape, dtype, device):
    axes = [torch.arange(s, dtype=dtype, device=device) - (s - 1) / 2.0 for s in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def affine_to_field(transform, shape, dtype=None, device=None):
    """Sample an affine transform as a dense displacement field on `shape`.

    u(p) = A·p_c + b − p_c with p_c the center-origin voxel coordinate.
    Accepts an AffineTransform, a (3, 4) matrix, or a batched (N, 3, 4)
    tensor; returns (3, D, H, W) or (N, 3, D, H, W) respectively. The
    field dtype follows the input matrix unless `dtype` overrides it.
    """
    if isinstance(transform, AffineTransform):
        mat = torch.as_tensor(transform.matrix)
    else:
        mat, _ = _as_tensor(transform)
    if dtype is None:
        dtype = mat.dtype if mat.dtype in (torch.float32, torch.float64) else torch.float32
    mat = mat.to(dtype=dtype, device=device)
    batched = mat.ndim == 3
    if not batched:
        mat = mat[None]
    if mat.shape[-2:] != (3, 4):
        raise ValueError(f"affine matrix must be (..., 3, 4), got {tuple(mat.shape)}")

    grid = _centered_grid(shape, dtype, mat.device)
    delta = mat[:, :, :3] - torch.eye(3, dtype=dtype, device=mat.device)
    field = torch.einsum("nca,adhw->ncdhw", delta, grid) + mat[:, :, 3, None, None, None]
    return field if batched else field[0]


def _flat_index(ix, iy, iz, shape):
    _, h, w = shape
    return (ix * h + iy) * w + iz


def warp(source, field, mode="linear"):
    """Resample `source` at p + u(p).

    source: (D, H, W), (C, D, H, W) or (N, C, D, H, W); field: (3, D, H, W)
    or (N, 3, D, H, W) matching the source's spatial shape. `mode` is
    "linear" (trilinear) or "nearest" (for label maps). Returns the same
    array kind and leading shape as `source`.
    """
    src, src_np = _as_tensor(source)
    flow, _ = _as_tensor(field)
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown interpolation mode: {mode}")

    in_ndim = src.ndim
    if in_ndim == 3:
        src_b = src[None, None]
    elif in_ndim == 4:
        src_b = src[None]
    elif in_ndim == 5:
        src_b = src
    else:
        raise ValueError(f"source must have 3-5 dims, got {in_ndim}")
    flow_b = flow[None] if flow.ndim == 4 else flow
    if flow_b.ndim != 5 or flow_b.shape[1] != 3:
        raise ValueError(f"field must be (3, D, H, W) or (N, 3, D, H, W), got {tuple(flow.shape)}")
    if tuple(flow_b.shape[2:]) != tuple(src_b.shape[2:]):
        raise ValueError(
            f"field grid {tuple(flow_b.shape[2:])} does not match source {tuple(src_b.shape[2:])}")
    if src_b.shape[0] != flow_b.shape[0]:
        if flow_b.shape[0] == 1:
            flow_b = flow_b.expand(src_b.shape[0], -1, -1, -1, -1)
        else:
            raise ValueError("batch size mismatch between source and field")

    compute_dtype = flow_b.dtype if flow_b.is_floating_point() else torch.float32
    if src_b.is_floating_point():
        compute_dtype = torch.promote_types(compute_dtype, src_b.dtype)
    values = src_b if src_b.dtype == compute_dtype else src_b.to(compute_dtype)
    n, c, d, h, w = values.shape
    shape = (d, h, w)
    base = torch.stack(torch.meshgrid(
        *[torch.arange(s, dtype=compute_dtype, device=values.device) for s in shape],
        indexing="ij"))
    coords = base[None] + flow_b.to(compute_dtype)

    flat = values.reshape(n, c, -1)
    if mode == "nearest":
        idx = [coords[:, a].round().long().clamp_(0, shape[a] - 1) for a in range(3)]
        gathered = flat.gather(2, _flat_index(*idx, shape).reshape(n, 1, -1).expand(n, c, -1))
        out = gathered.reshape(n, c, d, h, w)
        if not src_b.is_floating_point():
            out = out.to(src_b.dtype)
    else:
        cl = [coords[:, a].clamp(0, shape[a] - 1) for a in range(3)]
        lo = [x.floor() for x in cl]
        frac = [x - f for x, f in zip(cl, lo)]
        # integer clamp keeps indices legal even for non-finite coordinates
        # (the NaN then propagates through the weights, not a gather crash)
        i0 = [f.long().clamp_(0, shape[a] - 1) for a, f in enumerate(lo)]
        i1 = [(i + 1).clamp_(max=shape[a] - 1) for a, i in enumerate(i0)]
        out = torch.zeros_like(values)
        for corner in range(8):
            picks = [(i1[a] if corner >> a & 1 else i0[a]) for a in range(3)]
            wgt = torch.ones_like(frac[0])
            for a in range(3):
                wgt = wgt * (frac[a] if corner >> a & 1 else 1.0 - frac[a])
            gathered = flat.gather(
                2, _flat_index(*picks, shape).reshape(n, 1, -1).expand(n, c, -1))
            out = out + wgt[:, None] * gathered.reshape(n, c, d, h, w)

    if in_ndim == 3:
        out = out[0, 0]
    elif in_ndim == 4:
        out = out[0]
    return _restore(out, src_np)


def upsample_field(field, size=None):
    """Double a field's resolution (trilinear) and convert values to the
    finer grid's voxel units (×2). `size` overrides the exact output shape
    for grids whose levels are not exact powers of two."""
    flow, was_np = _as_tensor(field)
    batched = flow.ndim == 5
    f = flow if batched else flow[None]
    f = f.float() if not f.is_floating_point() else f
    if size is None:
        size = tuple(2 * s for s in f.shape[2:])
    up = F.interpolate(f, size=tuple(size), mode="trilinear", align_corners=True) * 2.0
    return _restore(up if batched else up[0], was_np)


def compose_add(coarse, fine):
    """Additive composition of two fields on the same grid."""
    a, was_np = _as_tensor(coarse)
    b, _ = _as_tensor(fine)
    if a.shape != b.shape:
        raise ValueError(f"field shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _restore(a + b, was_np)


def jacobian_det(field):
    """det(I + ∇u) per voxel, forward differences (backward at the far edge).

    (3, D, H, W) -> (D, H, W); batched input gives batched output.
    """
    flow, was_np = _as_tensor(field)
    batched = flow.ndim == 5
    f = flow if batched else flow[None]
    if not f.is_floating_point():
        f = f.float()
    if any(s < 2 for s in f.shape[2:]):
        raise ValueError("each spatial dimension must be >= 2")

    grads = []
    for axis in range(3):
        dim = 2 + axis
        d = torch.diff(f, dim=dim)
        d = torch.cat([d, d.narrow(dim, d.shape[dim] - 1, 1)], dim=dim)
        grads.append(d)
    # j[c][a] = d(flow_c)/d(axis_a) + delta_ca
    j = [[grads[a][:, c] + (1.0 if a == c else 0.0) for a in range(3)] for c in range(3)]
    det = (
        j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
    )
    return _restore(det if batched else det[0], was_np)


def njd_percent(field):
    """Percentage of voxels whose Jacobian determinant is <= 0."""
    det, _ = _as_tensor(jacobian_det(field))
    return float((det <= 0).double().mean().item() * 100.0)
