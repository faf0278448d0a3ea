"""Synthetic multi-blob phantoms with known registration ground truth.

A pair is built from a fixed phantom: the ground-truth field u (affine
plus smooth random deformation) is the field that aligns moving onto
fixed, and the moving image is the fixed image resampled through the
numerically inverted transform. Applying u as the predicted field
therefore recovers the fixed image up to the generator's own resampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import volumes
from .fields import AffineTransform, affine_to_field, njd_percent, warp


@dataclass(frozen=True)
class SyntheticPairSpec:
    seed: int = 0
    shape: tuple = (32, 32, 32)
    rotation_max: float = 0.0      # radians, per axis
    translation_max: float = 0.0   # voxels, per axis
    scale_max: float = 0.0         # fractional deviation from 1
    deform_amplitude: float = 0.0  # peak displacement magnitude, voxels
    deform_scale: float = 4.0      # smoothing sigma of the random field, voxels
    num_blobs: int = 4

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if len(self.shape) != 3 or any(s < 8 for s in self.shape):
            raise ValueError(f"shape must be 3D with sides >= 8, got {self.shape}")
        if self.num_blobs < 2:
            raise ValueError("need at least 2 label regions")

    def to_text(self):
        lines = [
            f"seed={self.seed}",
            f"shape={','.join(str(s) for s in self.shape)}",
            f"rotation_max={self.rotation_max!r}",
            f"translation_max={self.translation_max!r}",
            f"scale_max={self.scale_max!r}",
            f"deform_amplitude={self.deform_amplitude!r}",
            f"deform_scale={self.deform_scale!r}",
            f"num_blobs={self.num_blobs}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        return cls(
            seed=int(kv["seed"]),
            shape=tuple(int(s) for s in kv["shape"].split(",")),
            rotation_max=float(kv["rotation_max"]),
            translation_max=float(kv["translation_max"]),
            scale_max=float(kv["scale_max"]),
            deform_amplitude=float(kv["deform_amplitude"]),
            deform_scale=float(kv["deform_scale"]),
            num_blobs=int(kv["num_blobs"]),
        )


@dataclass
class SyntheticPair:
    fixed: np.ndarray
    moving: np.ndarray
    labels_fixed: np.ndarray
    labels_moving: np.ndarray
    truth_field: np.ndarray          # aligns moving onto fixed, (3, D, H, W)
    truth_affine: AffineTransform
    spec: SyntheticPairSpec = field(default=None)


def _phantom(spec, rng):
    shape = np.asarray(spec.shape)
    vol = np.zeros(spec.shape, dtype=np.float64)
    labels = np.zeros(spec.shape, dtype=np.int32)
    grid = np.stack(np.meshgrid(*[np.arange(s) for s in spec.shape], indexing="ij"))

    # keep blobs away from the border so warping never clips anatomy
    lo, hi = 0.28, 0.72
    centers = []
    min_sep = 0.22 * shape.min()
    attempts = 0
    while len(centers) < spec.num_blobs and attempts < 2000:
        attempts += 1
        c = rng.uniform(lo, hi, 3) * shape
        if all(np.linalg.norm(c - o) >= min_sep for o in centers):
            centers.append(c)
    if len(centers) < spec.num_blobs:
        raise ValueError(f"could not place {spec.num_blobs} blobs in shape {spec.shape}")

    for idx, c in enumerate(centers):
        radius = rng.uniform(0.10, 0.16) * shape.min()
        peak = rng.uniform(0.6, 1.0)
        r2 = ((grid - c[:, None, None, None]) ** 2).sum(axis=0)
        vol += peak * np.exp(-r2 / (2 * (radius / 1.5) ** 2))
        labels[r2 <= radius**2] = idx + 1

    # faint smooth texture so local windows always carry signal
    texture = ndimage.gaussian_filter(rng.standard_normal(spec.shape), 2.0)
    texture = (texture - texture.min()) / (np.ptp(texture) + 1e-12)
    vol += 0.1 * texture

    return volumes.normalize_intensity(vol).astype(np.float32), labels


def _random_affine(spec, rng):
    rot = rng.uniform(-spec.rotation_max, spec.rotation_max, 3)
    trans = rng.uniform(-spec.translation_max, spec.translation_max, 3)
    scale = 1.0 + rng.uniform(-spec.scale_max, spec.scale_max, 3)
    return AffineTransform.from_components(rotation=rot, translation=trans, scale=scale)


def _random_smooth_field(spec, rng):
    if spec.deform_amplitude == 0.0:
        return np.zeros((3,) + spec.shape)
    noise = rng.standard_normal((3,) + spec.shape)
    smooth = np.stack([ndimage.gaussian_filter(n, spec.deform_scale) for n in noise])
    mag = np.sqrt((smooth**2).sum(axis=0)).max()
    return smooth * (spec.deform_amplitude / max(mag, 1e-12))


def _invert_field(u, init=None, iterations=40):
    """Fixed-point inversion: find v with u(q + v(q)) + v(q) = 0."""
    v = np.zeros_like(u) if init is None else np.asarray(init, dtype=u.dtype)
    for _ in range(iterations):
        v = -np.asarray(warp(u, v))
    return v


def synth_pair(spec, affine=None, deform=None):
    """Generate a fixed/moving pair with labels and ground truth.

    `affine` / `deform` override the random draws (used for targeted
    tests); by default both are drawn from the magnitudes in `spec`.
    Raises if the ground-truth transform folds (NJD > 0).
    """
    rng = np.random.default_rng(spec.seed)
    fixed, labels_fixed = _phantom(spec, rng)

    truth_affine = _random_affine(spec, rng) if affine is None else affine
    smooth = _random_smooth_field(spec, rng) if deform is None else np.asarray(deform)

    truth = np.asarray(affine_to_field(truth_affine, spec.shape)) + smooth
    truth = truth.astype(np.float64)

    if njd_percent(truth) > 0.0:
        raise ValueError(
            "ground-truth transform folds (NJD > 0); reduce the deformation "
            "amplitude or affine magnitudes")

    if not truth.any():
        moving = fixed.copy()
        labels_moving = labels_fixed.copy()
    else:
        inverse = _invert_field(
            truth, init=np.asarray(affine_to_field(truth_affine.inverse(), spec.shape)))
        moving = np.asarray(warp(fixed, inverse)).astype(np.float32)
        labels_moving = np.asarray(warp(labels_fixed, inverse, mode="nearest"))

    return SyntheticPair(
        fixed=fixed,
        moving=moving,
        labels_fixed=labels_fixed,
        labels_moving=labels_moving,
        truth_field=truth.astype(np.float32),
        truth_affine=truth_affine,
        spec=spec,
    )


# --- on-disk dataset layout -------------------------------------------------

MANIFEST_NAME = "manifest.txt"


def save_pair(directory, pair):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    volumes.save_volume(directory / "fixed.nii.gz", pair.fixed)
    volumes.save_volume(directory / "moving.nii.gz", pair.moving)
    volumes.save_labels(directory / "labels_fixed.nii.gz", pair.labels_fixed)
    volumes.save_labels(directory / "labels_moving.nii.gz", pair.labels_moving)
    volumes.save_field(directory / "truth_field.nii.gz", pair.truth_field)
    pair.truth_affine.save_txt(directory / "truth_affine.txt")
    if pair.spec is not None:
        (directory / "spec.txt").write_text(pair.spec.to_text())


def load_pair(directory):
    directory = Path(directory)
    spec_file = directory / "spec.txt"
    return SyntheticPair(
        fixed=volumes.load_volume(directory / "fixed.nii.gz"),
        moving=volumes.load_volume(directory / "moving.nii.gz"),
        labels_fixed=volumes.load_labels(directory / "labels_fixed.nii.gz"),
        labels_moving=volumes.load_labels(directory / "labels_moving.nii.gz"),
        truth_field=volumes.load_field(directory / "truth_field.nii.gz"),
        truth_affine=AffineTransform.load_txt(directory / "truth_affine.txt"),
        spec=SyntheticPairSpec.from_text(spec_file.read_text()) if spec_file.exists() else None,
    )


def generate_dataset(directory, base_spec, count):
    """Write `count` pairs (seeds base_seed..base_seed+count-1) plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(count):
        pair_spec = replace(base_spec, seed=base_spec.seed + i)
        pair = synth_pair(pair_spec)
        name = f"pair_{i:03d}"
        save_pair(directory / name, pair)
        names.append(name)
    (directory / MANIFEST_NAME).write_text("\n".join(names) + "\n")
    return names


def load_dataset(directory):
    """Load every pair listed in a dataset manifest."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    names = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    if not names:
        raise ValueError(f"empty dataset manifest in {directory}")
    return [load_pair(directory / name) for name in names]
