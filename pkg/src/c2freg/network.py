"""Single-pass coarse-to-fine registration network.

A weight-shared convolutional encoder turns the fixed and moving volumes
into two feature pyramids. A single decoder path walks the pyramid from
coarse to fine; each stage fuses the fixed features with the moving
features warped by the running field estimate, and a registration head
(affine at the first `affine_steps` stages, dense displacement after
that) refines the field, which is upsampled (x2, values doubled) between
stages and added to the next head output.

Decoder stages with a positive head count use windowed multi-head
self-attention blocks (four per stage, alternating plain and shifted
windows); stages with head count 0 use a plain two-layer conv module.
The `variant` switch swaps conv and attention modules in the encoder
and/or decoder for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .fields import affine_to_field, compose_add, upsample_field, warp

VARIANTS = ("baseline", "trans_encoder", "trans_decoder", "trans_all")

ATTN_WINDOW_CHUNK = 1024  # windows processed per attention matmul


@dataclass(frozen=True)
class ModelConfig:
    affine_steps: int = 1
    deform_steps: int = 4
    encoder_dims: tuple = (8, 16, 32, 64, 128)
    decoder_dims: tuple = (256, 128, 64, 32, 16)
    attn_heads: tuple = (16, 8, 4, 2, 0)
    window_size: tuple = (5, 5, 5)
    variant: str = "trans_decoder"

    def __post_init__(self):
        object.__setattr__(self, "encoder_dims", tuple(self.encoder_dims))
        object.__setattr__(self, "decoder_dims", tuple(self.decoder_dims))
        object.__setattr__(self, "attn_heads", tuple(self.attn_heads))
        object.__setattr__(self, "window_size", tuple(self.window_size))
        if self.affine_steps < 0 or self.deform_steps < 1:
            raise ValueError("need affine_steps >= 0 and deform_steps >= 1")
        L = self.levels
        if not (len(self.encoder_dims) == len(self.decoder_dims) == len(self.attn_heads) == L):
            raise ValueError(
                f"dims/heads must all have length {L}: got {self.encoder_dims}, "
                f"{self.decoder_dims}, {self.attn_heads}")
        if self.attn_heads[-1] != 0:
            raise ValueError("the finest decoder stage must be a conv module (heads 0)")
        for dim, heads in zip(self.decoder_dims, self.attn_heads):
            if heads > 0 and dim % heads:
                raise ValueError(f"decoder dim {dim} not divisible by {heads} heads")
        if len(self.window_size) != 3 or any(w < 1 for w in self.window_size):
            raise ValueError(f"bad window size {self.window_size}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def levels(self):
        return self.affine_steps + self.deform_steps

    @property
    def decoder_uses_attention(self):
        return self.variant in ("trans_decoder", "trans_all")

    @property
    def encoder_uses_attention(self):
        return self.variant in ("trans_encoder", "trans_all")

    @classmethod
    def for_steps(cls, affine_steps, deform_steps, variant="trans_decoder",
                  window_size=(5, 5, 5)):
        """Default channel/head ladder for an arbitrary step count."""
        L = affine_steps + deform_steps
        enc = tuple(8 * 2**i for i in range(L))
        dec = tuple(2 * enc[L - 1 - i] for i in range(L))
        heads = tuple(d // 16 for d in dec[:-1]) + (0,)
        return cls(affine_steps=affine_steps, deform_steps=deform_steps,
                   encoder_dims=enc, decoder_dims=dec, attn_heads=heads,
                   window_size=window_size, variant=variant)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class RegistrationResult:
    fields: list                 # phi_1..phi_L, each (N, 3, d_k, h_k, w_k)
    final_field: torch.Tensor    # (N, 3, D, H, W), full resolution
    warped: torch.Tensor         # (N, 1, D, H, W)
    affine: torch.Tensor | None  # (N, 3, 4) additive composition of the
                                 # affine steps in full-resolution voxel units


class ConvModule(nn.Module):
    """Two 3x3x3 convolutions, each followed by LeakyReLU(0.2)."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, 1, 1)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, 1, 1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        x = self.act(self.conv1(x))
        x = self.act(self.conv2(x))
        return x


def _window_partition(x, window):
    # (N, Dp, Hp, Wp, C) -> (N, nW, w0*w1*w2, C)
    n, d, h, w, c = x.shape
    x = x.view(n, d // window[0], window[0], h // window[1], window[1],
               w // window[2], window[2], c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).contiguous()
    return x.view(n, -1, window[0] * window[1] * window[2], c)


def _window_reverse(windows, window, dims):
    n, d, h, w = dims
    c = windows.shape[-1]
    x = windows.view(n, d // window[0], h // window[1], w // window[2],
                     window[0], window[1], window[2], c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).contiguous()
    return x.view(n, d, h, w, c)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping 3D windows with a
    learned relative-position bias per head."""

    def __init__(self, dim, heads, window):
        super().__init__()
        if heads < 1:
            raise ValueError("heads must be >= 1")
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.window = tuple(window)
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

        span = [2 * w - 1 for w in self.window]
        self.bias_table = nn.Parameter(torch.zeros(span[0] * span[1] * span[2], heads))
        nn.init.trunc_normal_(self.bias_table, std=0.02)

        coords = torch.stack(torch.meshgrid(
            *[torch.arange(w) for w in self.window], indexing="ij"))
        flat = coords.flatten(1)
        rel = flat[:, :, None] - flat[:, None, :]
        rel = rel.permute(1, 2, 0).contiguous()
        for a in range(3):
            rel[:, :, a] += self.window[a] - 1
        index = (rel[:, :, 0] * span[1] + rel[:, :, 1]) * span[2] + rel[:, :, 2]
        self.register_buffer("bias_index", index, persistent=False)

    def forward(self, windows, mask=None, return_weights=False):
        # windows: (N, nW, tokens, C); mask: (nW, tokens, tokens) additive
        n, nw, t, c = windows.shape
        bias = self.bias_table[self.bias_index.view(-1)].view(t, t, self.heads)
        bias = bias.permute(2, 0, 1)

        outs = []
        weights = []
        for start in range(0, nw, ATTN_WINDOW_CHUNK):
            stop = min(start + ATTN_WINDOW_CHUNK, nw)
            x = windows[:, start:stop].reshape(n * (stop - start), t, c)
            qkv = self.qkv(x).reshape(-1, t, 3, self.heads, c // self.heads)
            q, k, v = qkv.permute(2, 0, 3, 1, 4)
            attn = (q * self.scale) @ k.transpose(-2, -1) + bias
            if mask is not None:
                attn = attn.view(n, stop - start, self.heads, t, t)
                attn = attn + mask[start:stop][None, :, None]
                attn = attn.view(-1, self.heads, t, t)
            attn = attn.softmax(dim=-1)
            if return_weights:
                weights.append(attn.view(n, stop - start, self.heads, t, t))
            out = (attn @ v).transpose(1, 2).reshape(-1, t, c)
            outs.append(self.proj(out).view(n, stop - start, t, c))
        result = torch.cat(outs, dim=1)
        if return_weights:
            return result, torch.cat(weights, dim=1)
        return result


def _shift_mask(orig, padded, window, shift, device):
    """Additive attention mask (nW, tokens, tokens): -inf between tokens
    that are not pre-shift neighbours or that lie in the zero padding."""
    ids = torch.zeros(padded, device=device)
    if any(shift):
        cnt = 0
        slices = []
        for w, s in zip(window, shift):
            if s:
                slices.append((slice(0, -w), slice(-w, -s), slice(-s, None)))
            else:
                slices.append((slice(None),))
        for sd in slices[0]:
            for sh in slices[1]:
                for sw in slices[2]:
                    ids[sd, sh, sw] = cnt
                    cnt += 1
    pad_mask = torch.ones(padded, dtype=torch.bool, device=device)
    pad_mask[: orig[0], : orig[1], : orig[2]] = False
    if any(shift):
        pad_mask = torch.roll(pad_mask, shifts=[-s for s in shift], dims=(0, 1, 2))
    ids = ids.masked_fill(pad_mask, -1.0)

    win_ids = _window_partition(ids[None, ..., None], window)[0, ..., 0]
    mask = win_ids[:, None, :] - win_ids[:, :, None]
    return torch.where(mask == 0, 0.0, float("-inf"))


class SwinBlock(nn.Module):
    """Pre-norm attention + MLP block over (shifted) local windows."""

    def __init__(self, dim, heads, window, shift):
        super().__init__()
        self.window = tuple(window)
        self.shift = tuple(shift)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self._mask_cache = {}

    def _layout(self, spatial):
        # no point cyclic-shifting an axis that fits in a single window
        shift = tuple(0 if size <= w else s
                      for size, w, s in zip(spatial, self.window, self.shift))
        padded = tuple(size + (-size) % w for size, w in zip(spatial, self.window))
        return shift, padded

    def _mask(self, spatial, device):
        shift, padded = self._layout(spatial)
        if padded == tuple(spatial) and not any(shift):
            return None
        key = (tuple(spatial), device)
        if key not in self._mask_cache:
            self._mask_cache = {key: _shift_mask(spatial, padded, self.window, shift, device)}
        return self._mask_cache[key]

    def _attend(self, x, return_weights=False):
        # x: (N, D, H, W, C) already normalized
        spatial = tuple(x.shape[1:4])
        shift, padded = self._layout(spatial)
        pads = [p - s for p, s in zip(padded, spatial)]
        x = F.pad(x, (0, 0, 0, pads[2], 0, pads[1], 0, pads[0]))
        if any(shift):
            x = torch.roll(x, shifts=[-s for s in shift], dims=(1, 2, 3))
        windows = _window_partition(x, self.window)
        mask = self._mask(spatial, x.device)
        out = self.attn(windows, mask, return_weights=return_weights)
        if return_weights:
            out, weights = out
        x = _window_reverse(out, self.window, (x.shape[0],) + padded)
        if any(shift):
            x = torch.roll(x, shifts=list(shift), dims=(1, 2, 3))
        x = x[:, : spatial[0], : spatial[1], : spatial[2]]
        return (x, weights) if return_weights else x

    def forward(self, x):
        # x: (N, C, D, H, W)
        xt = x.permute(0, 2, 3, 4, 1)
        xt = xt + self._attend(self.norm1(xt))
        xt = xt + self.mlp(self.norm2(xt))
        return xt.permute(0, 4, 1, 2, 3)


class SwinModule(nn.Module):
    """1x1x1 channel-reduction conv followed by four window-attention
    blocks alternating between plain and shifted windows."""

    def __init__(self, in_channels, dim, heads, window):
        super().__init__()
        self.reduce = nn.Conv3d(in_channels, dim, 1)
        shift = tuple(w // 2 for w in window)
        zero = (0, 0, 0)
        self.blocks = nn.ModuleList(
            SwinBlock(dim, heads, window, zero if i % 2 == 0 else shift)
            for i in range(4))

    def forward(self, x):
        x = self.reduce(x)
        for block in self.blocks:
            x = block(x)
        return x


class PatchExpand(nn.Module):
    """Double the resolution and halve the channels via a pointwise linear
    expansion rearranged into 2x2x2 spatial blocks."""

    def __init__(self, channels):
        super().__init__()
        if channels % 2:
            raise ValueError(f"channel count must be even, got {channels}")
        self.expand = nn.Conv3d(channels, 4 * channels, 1)

    def forward(self, x):
        x = self.expand(x)
        return rearrange(x, "n (p1 p2 p3 c) d h w -> n c (d p1) (h p2) (w p3)",
                         p1=2, p2=2, p3=2)


class AffineHead(nn.Module):
    """Global average pooling and two fully-connected layers emitting 12
    residuals to the identity 3x4 matrix; zero-initialized output layer."""

    def __init__(self, channels):
        super().__init__()
        self.hidden = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, 12)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        identity = torch.cat([torch.eye(3), torch.zeros(3, 1)], dim=1)
        self.register_buffer("identity", identity, persistent=False)

    def forward(self, x):
        pooled = x.mean(dim=(2, 3, 4))
        delta = self.out(F.leaky_relu(self.hidden(pooled), 0.2))
        return delta.view(-1, 3, 4) + self.identity


class DeformHead(nn.Module):
    """One 3x3x3 convolution to a dense 3-vector field; zero-initialized."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv3d(channels, 3, 3, 1, 1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        return self.conv(x)


def _encoder_heads(dim):
    return max(1, dim // 16)


class C2FRegNet(nn.Module):
    """Joint affine + deformable registration in one forward pass."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        L = cfg.levels

        self.encoder = nn.ModuleList()
        in_ch = 1
        for dim in cfg.encoder_dims:
            if cfg.encoder_uses_attention:
                self.encoder.append(SwinModule(in_ch, dim, _encoder_heads(dim),
                                               cfg.window_size))
            else:
                self.encoder.append(ConvModule(in_ch, dim))
            in_ch = dim
        self.pool = nn.MaxPool3d(2, ceil_mode=True)

        self.decoder = nn.ModuleList()
        self.expands = nn.ModuleList()
        self.affine_heads = nn.ModuleList()
        self.deform_heads = nn.ModuleList()
        for k in range(L):
            enc_dim = cfg.encoder_dims[L - 1 - k]
            if k == 0:
                in_ch = 2 * enc_dim
            else:
                self.expands.append(PatchExpand(cfg.decoder_dims[k - 1]))
                in_ch = cfg.decoder_dims[k - 1] // 2 + 2 * enc_dim
            dim = cfg.decoder_dims[k]
            heads = cfg.attn_heads[k]
            if cfg.decoder_uses_attention and heads > 0:
                self.decoder.append(SwinModule(in_ch, dim, heads, cfg.window_size))
            else:
                self.decoder.append(ConvModule(in_ch, dim))
            if k < cfg.affine_steps:
                self.affine_heads.append(AffineHead(dim))
            else:
                self.deform_heads.append(DeformHead(dim))

    def encode(self, x):
        """Feature pyramid for one volume; level i sits at scale 1/2^i."""
        features = []
        for i, module in enumerate(self.encoder):
            if i > 0:
                x = self.pool(x)
            x = module(x)
            features.append(x)
        return features

    def forward(self, fixed, moving):
        cfg = self.config
        L = cfg.levels
        if fixed.shape != moving.shape:
            raise ValueError(f"shape mismatch: {tuple(fixed.shape)} vs {tuple(moving.shape)}")
        if fixed.ndim != 5 or fixed.shape[1] != 1:
            raise ValueError(f"expected (N, 1, D, H, W) input, got {tuple(fixed.shape)}")
        min_side = 2 ** (L - 1)
        if any(s < min_side for s in fixed.shape[2:]):
            raise ValueError(
                f"input {tuple(fixed.shape[2:])} too small for {L} levels "
                f"(needs sides >= {min_side})")

        f_fixed = self.encode(fixed)
        f_moving = self.encode(moving)

        fields = []
        affine = None
        phi = None
        x = None
        for k in range(L):
            lvl = L - 1 - k
            skip_shape = f_fixed[lvl].shape[2:]
            if k == 0:
                x = torch.cat([f_fixed[lvl], f_moving[lvl]], dim=1)
                phi_up = None
            else:
                expanded = self.expands[k - 1](x)
                expanded = expanded[:, :, : skip_shape[0], : skip_shape[1], : skip_shape[2]]
                phi_up = upsample_field(phi, size=skip_shape)
                moved = warp(f_moving[lvl], phi_up)
                x = torch.cat([expanded, f_fixed[lvl], moved], dim=1)
            x = self.decoder[k](x)

            if k < cfg.affine_steps:
                mat = self.affine_heads[k](x)
                delta = affine_to_field(mat, skip_shape)
                # analytic view of the additive composition, expressed in
                # full-resolution voxel units
                residual = mat.clone()
                residual[:, :, 3] *= 2.0 ** lvl
                residual[:, :, :3] -= torch.eye(3, device=mat.device, dtype=mat.dtype)
                affine = residual if affine is None else affine + residual
            else:
                delta = self.deform_heads[k - cfg.affine_steps](x)
            phi = delta if phi_up is None else compose_add(phi_up, delta)
            fields.append(phi)

        if affine is not None:
            affine = affine + torch.eye(3, 4, device=affine.device, dtype=affine.dtype)
        warped = warp(moving, fields[-1])
        return RegistrationResult(fields=fields, final_field=fields[-1],
                                  warped=warped, affine=affine)

    def level_shapes(self, spatial):
        """Decoder-stage grid shapes (coarse to fine) for a given input shape."""
        shapes = [tuple(spatial)]
        for _ in range(self.config.levels - 1):
            shapes.append(tuple((s + 1) // 2 for s in shapes[-1]))
        return shapes[::-1]

    def affine_only_field(self, result: RegistrationResult, spatial):
        """Upsample the last affine-step field through the remaining levels
        to full resolution (the same path the forward pass uses)."""
        if self.config.affine_steps == 0:
            raise ValueError("model has no affine steps")
        shapes = self.level_shapes(spatial)
        phi = result.fields[self.config.affine_steps - 1]
        for shape in shapes[self.config.affine_steps:]:
            phi = upsample_field(phi, size=shape)
        return phi


def build_model(config: ModelConfig | None = None, seed: int = 0):
    """Deterministically initialized network."""
    torch.manual_seed(seed)
    return C2FRegNet(config)


def count_params(module):
    """Learnable scalar counts, total and per top-level module group."""
    groups = {}
    for name, param in module.named_parameters():
        group = name.split(".")[0]
        groups[group] = groups.get(group, 0) + param.numel()
    groups["total"] = sum(p.numel() for p in module.parameters())
    return groups
