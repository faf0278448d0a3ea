import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c2freg import nifti, volumes


class TestLoadSave:
    def test_round_trip(self, tmp_path):
        vol = np.random.default_rng(3).random((6, 5, 4)).astype(np.float32)
        path = tmp_path / "v.nii.gz"
        volumes.save_volume(path, vol)
        assert np.array_equal(volumes.load_volume(path), vol)

    def test_multichannel_rejected(self, tmp_path):
        path = tmp_path / "4d.nii"
        nifti.write_nifti(path, np.zeros((4, 4, 4, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="non-3D input"):
            volumes.load_volume(path)

    def test_paper_crop_shape_preserved(self, tmp_path):
        path = tmp_path / "big.nii.gz"
        volumes.save_volume(path, np.zeros((144, 192, 160), dtype=np.float32))
        assert volumes.load_volume(path).shape == (144, 192, 160)

    def test_field_round_trip(self, tmp_path):
        field = np.random.default_rng(4).random((3, 4, 5, 6)).astype(np.float32)
        path = tmp_path / "f.nii.gz"
        volumes.save_field(path, field)
        assert np.array_equal(volumes.load_field(path), field)

    def test_labels_round_trip(self, tmp_path):
        labels = np.random.default_rng(5).integers(0, 4, (4, 4, 4)).astype(np.int32)
        path = tmp_path / "l.nii.gz"
        volumes.save_labels(path, labels)
        assert np.array_equal(volumes.load_labels(path), labels)


class TestNormalize:
    def test_min_max_by_definition(self):
        v = np.array([[[0.0, 5.0, 10.0]]], dtype=np.float32)
        assert np.allclose(volumes.normalize_intensity(v), [[[0.0, 0.5, 1.0]]])

    def test_constant_maps_to_zeros(self):
        v = np.full((3, 3, 3), 7.0, dtype=np.float32)
        assert np.array_equal(volumes.normalize_intensity(v), np.zeros((3, 3, 3)))

    def test_unit_range_unchanged(self):
        v = np.random.default_rng(0).random((4, 4, 4)).astype(np.float32)
        v.flat[0] = 0.0
        v.flat[1] = 1.0
        assert np.allclose(volumes.normalize_intensity(v), v)

    def test_non_finite_rejected(self):
        v = np.ones((2, 2, 2), dtype=np.float32)
        v[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            volumes.normalize_intensity(v)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_idempotent_on_non_constant(self, seed):
        v = np.random.default_rng(seed).random((3, 4, 5))
        once = volumes.normalize_intensity(v)
        twice = volumes.normalize_intensity(once)
        assert np.allclose(once, twice, atol=1e-6)


class TestCenterOfMass:
    def test_identical_volumes_zero_shift(self):
        v = np.random.default_rng(1).random((8, 8, 8)).astype(np.float32)
        assert volumes.com_shift(v, v) == (0, 0, 0)
        assert np.array_equal(volumes.com_initialize(v, v), v)

    def test_recovers_known_shift(self):
        # brute-force CoM oracle on the shifted array
        rng = np.random.default_rng(2)
        fixed = np.zeros((16, 12, 12), dtype=np.float32)
        fixed[4:9, 3:8, 3:8] = rng.random((5, 5, 5)) + 0.5
        moving = volumes.shift_volume(fixed, (3, 0, 0))

        idx = np.indices(moving.shape)
        com_mov = (idx * moving).sum(axis=(1, 2, 3)) / moving.sum()
        com_fix = (idx * fixed).sum(axis=(1, 2, 3)) / fixed.sum()
        expect = tuple(int(round(d)) for d in com_fix - com_mov)
        assert expect == (-3, 0, 0)

        assert volumes.com_shift(fixed, moving) == (-3, 0, 0)
        assert np.array_equal(volumes.com_initialize(fixed, moving), fixed)

    def test_zero_mass_rejected(self):
        v = np.ones((4, 4, 4), dtype=np.float32)
        with pytest.raises(ValueError):
            volumes.com_initialize(v, np.zeros_like(v))

    def test_second_application_is_identity(self):
        rng = np.random.default_rng(3)
        fixed = np.zeros((12, 12, 12), dtype=np.float32)
        fixed[2:7, 4:9, 3:8] = rng.random((5, 5, 5))
        moving = volumes.shift_volume(fixed, (2, -1, 0))
        once = volumes.com_initialize(fixed, moving)
        assert volumes.com_shift(fixed, once) == (0, 0, 0)


class TestCropOrPad:
    def test_identity(self):
        v = np.random.default_rng(4).random((5, 6, 7))
        assert np.array_equal(volumes.crop_or_pad(v, v.shape), v)

    def test_crop_keeps_central_block(self):
        v = np.random.default_rng(5).random((10, 10, 10))
        out = volumes.crop_or_pad(v, (8, 8, 8))
        # index-arithmetic oracle: start = (10 - 8) // 2 = 1
        assert np.array_equal(out, v[1:9, 1:9, 1:9])

    def test_pad_is_invertible_by_crop(self):
        v = np.random.default_rng(6).random((8, 8, 8))
        padded = volumes.crop_or_pad(v, (10, 10, 10))
        assert np.array_equal(volumes.crop_or_pad(padded, (8, 8, 8)), v)

    def test_pad_fills_zero(self):
        v = np.ones((2, 2, 2))
        out = volumes.crop_or_pad(v, (4, 4, 4))
        assert out.sum() == 8
        assert out[0, 0, 0] == 0

    @given(st.tuples(*[st.integers(1, 9)] * 3), st.tuples(*[st.integers(1, 9)] * 3))
    @settings(max_examples=40, deadline=None)
    def test_output_shape_contract(self, shape, target):
        v = np.arange(np.prod(shape), dtype=np.float64).reshape(shape)
        assert volumes.crop_or_pad(v, target).shape == target

    @given(st.tuples(*[st.integers(1, 6)] * 3), st.tuples(*[st.integers(0, 4)] * 3))
    @settings(max_examples=40, deadline=None)
    def test_grow_then_shrink_round_trips(self, shape, extra):
        v = np.random.default_rng(7).random(shape)
        bigger = tuple(s + e for s, e in zip(shape, extra))
        assert np.array_equal(volumes.crop_or_pad(volumes.crop_or_pad(v, bigger), shape), v)
