import numpy as np
import pytest

from c2freg import synth
from c2freg.fields import AffineTransform, njd_percent, warp
from c2freg.synth import SyntheticPairSpec, synth_pair


DEFORM_SPEC = SyntheticPairSpec(
    seed=42, shape=(24, 24, 24), rotation_max=0.05, translation_max=1.5,
    scale_max=0.03, deform_amplitude=1.5, deform_scale=4.0, num_blobs=3)


class TestPhantom:
    def test_zero_magnitudes_give_identical_pair(self):
        pair = synth_pair(SyntheticPairSpec(seed=1, shape=(16, 16, 16)))
        assert np.array_equal(pair.moving, pair.fixed)
        assert np.array_equal(pair.labels_moving, pair.labels_fixed)
        assert np.array_equal(pair.truth_field, np.zeros_like(pair.truth_field))
        assert np.allclose(pair.truth_affine.matrix, AffineTransform.identity().matrix)

    def test_intensities_in_unit_range(self):
        pair = synth_pair(DEFORM_SPEC)
        assert pair.fixed.min() >= 0.0 and pair.fixed.max() <= 1.0

    def test_at_least_two_label_regions(self):
        pair = synth_pair(DEFORM_SPEC)
        assert len(np.unique(pair.labels_fixed)) - 1 >= 2
        assert pair.labels_fixed.shape == pair.fixed.shape

    def test_single_blob_rejected(self):
        with pytest.raises(ValueError):
            SyntheticPairSpec(num_blobs=1)


class TestGroundTruth:
    def test_same_seed_bitwise_identical(self):
        a = synth_pair(DEFORM_SPEC)
        b = synth_pair(DEFORM_SPEC)
        assert np.array_equal(a.fixed, b.fixed)
        assert np.array_equal(a.moving, b.moving)
        assert np.array_equal(a.truth_field, b.truth_field)
        assert np.array_equal(a.labels_moving, b.labels_moving)

    def test_different_seed_differs(self):
        a = synth_pair(DEFORM_SPEC)
        b = synth_pair(SyntheticPairSpec(**{**DEFORM_SPEC.__dict__, "seed": 43}))
        assert not np.array_equal(a.fixed, b.fixed)

    def test_translation_only_matches_array_shift(self):
        t = AffineTransform(np.hstack([np.eye(3), [[2.0], [0.0], [0.0]]]))
        pair = synth_pair(SyntheticPairSpec(seed=5, shape=(20, 20, 20)),
                          affine=t, deform=np.zeros((3, 20, 20, 20)))
        # array-shift oracle: truth (2,0,0) means moving content sits 2 voxels
        # toward larger x than fixed
        shifted = np.zeros_like(pair.labels_fixed)
        shifted[2:] = pair.labels_fixed[:-2]
        assert np.array_equal(pair.labels_moving, shifted)

    def test_truth_field_is_fold_free(self):
        pair = synth_pair(DEFORM_SPEC)
        assert njd_percent(pair.truth_field) == 0.0

    def test_folding_magnitude_rejected(self):
        bad = SyntheticPairSpec(seed=3, shape=(16, 16, 16),
                                deform_amplitude=12.0, deform_scale=1.5)
        with pytest.raises(ValueError, match="folds"):
            synth_pair(bad)

    def test_inverse_is_a_true_inverse(self):
        # u(q + v(q)) + v(q) must vanish for the generator's inverse v
        pair = synth_pair(DEFORM_SPEC)
        truth = pair.truth_field.astype(np.float64)
        inverse = synth._invert_field(
            truth, init=np.asarray(warp(np.zeros_like(truth), truth)))
        residual = np.asarray(warp(truth, inverse)) + inverse
        assert np.abs(residual).max() < 1e-3

    def test_truth_registers_pair(self):
        # applying the ground truth as the predicted field realigns the pair
        # (residual is double-resampling blur, far below the misalignment)
        pair = synth_pair(DEFORM_SPEC)
        realigned = np.asarray(warp(pair.moving, pair.truth_field))
        err = np.abs(realigned - pair.fixed).mean()
        base = np.abs(pair.moving - pair.fixed).mean()
        assert err < 0.15 * base

    def test_truth_registers_labels(self):
        pair = synth_pair(DEFORM_SPEC)
        realigned = np.asarray(warp(pair.labels_moving, pair.truth_field, mode="nearest"))
        mismatch = (realigned != pair.labels_fixed).mean()
        assert mismatch < 0.01


class TestSpecSerialization:
    def test_text_round_trip(self):
        text = DEFORM_SPEC.to_text()
        assert SyntheticPairSpec.from_text(text) == DEFORM_SPEC


class TestDatasetOnDisk:
    def test_save_load_round_trip(self, tmp_path):
        pair = synth_pair(DEFORM_SPEC)
        synth.save_pair(tmp_path / "p0", pair)
        back = synth.load_pair(tmp_path / "p0")
        assert np.array_equal(back.fixed, pair.fixed)
        assert np.array_equal(back.moving, pair.moving)
        assert np.array_equal(back.labels_fixed, pair.labels_fixed)
        assert np.array_equal(back.truth_field, pair.truth_field)
        assert np.allclose(back.truth_affine.matrix, pair.truth_affine.matrix)
        assert back.spec == DEFORM_SPEC

    def test_generate_dataset_manifest(self, tmp_path):
        names = synth.generate_dataset(tmp_path, SyntheticPairSpec(seed=7, shape=(12, 12, 12)), 3)
        assert names == ["pair_000", "pair_001", "pair_002"]
        pairs = synth.load_dataset(tmp_path)
        assert len(pairs) == 3
        # per-pair seeds advance from the base seed
        assert pairs[0].spec.seed == 7 and pairs[2].spec.seed == 9

    def test_regenerate_identical_files(self, tmp_path):
        spec = SyntheticPairSpec(seed=9, shape=(12, 12, 12), deform_amplitude=0.8)
        synth.generate_dataset(tmp_path / "a", spec, 2)
        synth.generate_dataset(tmp_path / "b", spec, 2)
        for rel in ["pair_000/fixed.nii.gz", "pair_001/moving.nii.gz", "pair_000/truth_field.nii.gz"]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            synth.load_dataset(tmp_path)
