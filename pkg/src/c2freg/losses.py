"""Unsupervised registration objective: similarity + weighted regularizers.

total = ncc + sigma * (diffusion + lam * jd)

All reductions are means over the voxel grid so the weights are
resolution-independent. Functions accept numpy arrays or torch tensors
(dtype preserved, so gradient checks can run in float64) and return
0-dim torch tensors that stay connected to the autograd graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .fields import _as_tensor, jacobian_det


@dataclass(frozen=True)
class LossConfig:
    sigma: float = 1.0       # weight of the whole regularization term
    lam: float = 1e-4        # weight of the folding penalty inside it
    ncc_window: int = 9      # odd window edge length, voxels
    epsilon: float = 1e-5    # variance floor

    def __post_init__(self):
        if self.ncc_window < 1 or self.ncc_window % 2 == 0:
            raise ValueError(f"ncc_window must be odd and >= 1, got {self.ncc_window}")


def _as_image_batch(x):
    t, _ = _as_tensor(x)
    if not t.is_floating_point():
        t = t.float()
    if t.ndim == 3:
        return t[None, None]
    if t.ndim == 5:
        return t
    raise ValueError(f"expected (D, H, W) or (N, C, D, H, W), got {tuple(t.shape)}")


def _as_field_batch(x):
    t, _ = _as_tensor(x)
    if not t.is_floating_point():
        t = t.float()
    if t.ndim == 4:
        t = t[None]
    if t.ndim != 5 or t.shape[1] != 3:
        raise ValueError(f"expected (3, D, H, W) or (N, 3, D, H, W), got {tuple(x.shape)}")
    return t


def _box_sum(x, window):
    # separable sum over a centered window, zero contribution outside the grid
    pad = window // 2
    for axis in range(3):
        shape = [1, 1, 1, 1, 1]
        shape[2 + axis] = window
        kernel = torch.ones(shape, dtype=x.dtype, device=x.device)
        padding = [0, 0, 0]
        padding[axis] = pad
        x = F.conv3d(x, kernel, padding=tuple(padding))
    return x


def ncc_loss(warped, fixed, cfg: LossConfig | None = None):
    """Negative mean of squared local normalized cross-correlation.

    Window statistics are taken over the window voxels that fall inside
    the grid, so border windows use their true (smaller) counts.
    """
    cfg = cfg or LossConfig()
    w = _as_image_batch(warped)
    f = _as_image_batch(fixed)
    if w.shape != f.shape:
        raise ValueError(f"shape mismatch: {tuple(w.shape)} vs {tuple(f.shape)}")
    if any(s < cfg.ncc_window for s in w.shape[2:]):
        raise ValueError(
            f"ncc window {cfg.ncc_window} exceeds volume shape {tuple(w.shape[2:])}")

    ones = torch.ones_like(w[:, :1])
    n = _box_sum(ones, cfg.ncc_window)
    sw = _box_sum(w, cfg.ncc_window)
    sf = _box_sum(f, cfg.ncc_window)
    sww = _box_sum(w * w, cfg.ncc_window)
    sff = _box_sum(f * f, cfg.ncc_window)
    swf = _box_sum(w * f, cfg.ncc_window)

    cross = swf - sw * sf / n
    var_w = (sww - sw * sw / n).clamp(min=0)
    var_f = (sff - sf * sf / n).clamp(min=0)
    cc = cross * cross / ((var_w + cfg.epsilon) * (var_f + cfg.epsilon))
    return -cc.mean()


def diffusion_loss(field):
    """Mean squared forward difference of the displacement, summed over axes.

    Each axis contributes the mean over its n-1 difference positions of the
    squared difference summed across vector components.
    """
    f = _as_field_batch(field)
    if any(s < 2 for s in f.shape[2:]):
        raise ValueError("each spatial dimension must be >= 2")
    total = f.new_zeros(())
    for axis in range(3):
        d = torch.diff(f, dim=2 + axis)
        total = total + (d * d).sum(dim=1).mean()
    return total


def jd_loss(field):
    """Mean hinge penalty on negative Jacobian determinants."""
    det = jacobian_det(_as_field_batch(field))
    return torch.relu(-det).mean()


def total_loss(warped, fixed, field, cfg: LossConfig | None = None):
    """Full objective and its per-term breakdown (floats, for logging)."""
    cfg = cfg or LossConfig()
    ncc = ncc_loss(warped, fixed, cfg)
    diff = diffusion_loss(field)
    jd = jd_loss(field)
    total = ncc + cfg.sigma * (diff + cfg.lam * jd)
    breakdown = {
        "ncc": float(ncc.detach()),
        "diffusion": float(diff.detach()),
        "jd": float(jd.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown
