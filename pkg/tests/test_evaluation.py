import numpy as np
import pytest
import torch

from c2freg import evaluation
from c2freg.evaluation import EvalRecord, dsc, difference_map, evaluate_pair, report
from c2freg.fields import warp
from c2freg.network import ModelConfig, build_model
from c2freg.synth import SyntheticPairSpec, synth_pair

TINY = ModelConfig.for_steps(1, 1)


class TestDsc:
    def test_identical_maps(self):
        a = np.random.default_rng(0).integers(0, 4, (6, 6, 6))
        assert dsc(a, a) == 1.0

    def test_disjoint_single_label(self):
        a = np.zeros((4, 4, 4), dtype=int)
        b = np.zeros((4, 4, 4), dtype=int)
        a[:2] = 1
        b[2:] = 1
        assert dsc(a, b) == 0.0

    def test_shifted_cube_voxel_count_oracle(self):
        # edge-4 cube in an 8^3 domain, shifted 2 voxels in x
        a = np.zeros((8, 8, 8), dtype=int)
        b = np.zeros((8, 8, 8), dtype=int)
        a[0:4, 0:4, 0:4] = 1
        b[2:6, 0:4, 0:4] = 1
        inter = np.logical_and(a == 1, b == 1).sum()
        expect = 2 * inter / ((a == 1).sum() + (b == 1).sum())
        assert inter == 32 and expect == 0.5
        assert dsc(a, b) == expect

    def test_label_missing_from_b_scores_zero(self):
        a = np.zeros((4, 4, 4), dtype=int)
        a[:2] = 1
        a[2:] = 2
        b = np.zeros((4, 4, 4), dtype=int)
        b[:2] = 1
        assert dsc(a, b) == 0.5  # label 1 perfect, label 2 vanished

    def test_symmetric_on_shared_label_set(self):
        rng = np.random.default_rng(1)
        a = rng.integers(0, 3, (6, 6, 6))
        b = rng.integers(0, 3, (6, 6, 6))
        if set(np.unique(a)) == set(np.unique(b)):
            assert dsc(a, b) == pytest.approx(dsc(b, a))

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(2)
        a = rng.integers(0, 4, (5, 5, 5))
        b = rng.integers(0, 4, (5, 5, 5))
        perm = {0: 0, 1: 3, 2: 1, 3: 2}
        pa = np.vectorize(perm.get)(a)
        pb = np.vectorize(perm.get)(b)
        assert dsc(a, b) == pytest.approx(dsc(pa, pb))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dsc(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)))


class TestEvaluatePair:
    def test_zero_init_model_keeps_dsc(self):
        pair = synth_pair(SyntheticPairSpec(
            seed=1, shape=(16, 16, 16), translation_max=2.0, num_blobs=2))
        model = build_model(TINY, seed=0)
        rec = evaluate_pair(model, pair.fixed, pair.moving,
                            pair.labels_fixed, pair.labels_moving, repeats=1)
        assert rec.dsc_after == rec.dsc_before
        assert rec.njd_percent == 0.0
        assert rec.runtime_seconds > 0.0

    def test_identity_pair_zero_init(self):
        pair = synth_pair(SyntheticPairSpec(seed=2, shape=(16, 16, 16), num_blobs=2))
        model = build_model(TINY, seed=0)
        rec = evaluate_pair(model, pair.fixed, pair.moving,
                            pair.labels_fixed, pair.labels_moving, repeats=1)
        assert rec.dsc_before == 1.0 and rec.dsc_after == 1.0

    def test_ground_truth_field_restores_labels(self):
        pair = synth_pair(SyntheticPairSpec(
            seed=3, shape=(20, 20, 20), translation_max=1.5,
            deform_amplitude=1.0, num_blobs=3))
        realigned = np.asarray(warp(pair.labels_moving, pair.truth_field, mode="nearest"))
        assert dsc(pair.labels_fixed, realigned) > 0.99
        assert dsc(pair.labels_fixed, pair.labels_moving) < 0.95  # pair starts misaligned


class TestDifferenceMap:
    def test_identical_inputs(self):
        v = np.random.default_rng(3).random((4, 4, 4)).astype(np.float32)
        assert np.array_equal(difference_map(v, v), np.zeros_like(v))

    def test_all_ones(self):
        assert np.array_equal(
            difference_map(np.zeros((3, 3, 3)), np.ones((3, 3, 3))),
            np.ones((3, 3, 3)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            difference_map(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def _rec(pair_id, before, after, njd, runtime):
    return EvalRecord(pair_id, before, after, njd, runtime)


class TestReport:
    def test_single_record_single_row(self):
        text, csv_text = report([_rec("p0", 0.4, 0.8, 0.1, 1.5)])
        assert "all" in text
        lines = csv_text.strip().splitlines()
        assert len(lines) == 2
        assert lines[1].startswith("all,1,0.400000,0.800000,0.100000,1.500000")

    def test_dominating_group_flagged_everywhere(self):
        good = [_rec("g", 0.3, 0.9, 0.0, 0.5)]
        bad = [_rec("b", 0.3, 0.5, 2.0, 1.5)]
        text, _ = report(None, {"good": good, "bad": bad})
        good_line = next(l for l in text.splitlines() if l.startswith("good"))
        bad_line = next(l for l in text.splitlines() if l.startswith("bad"))
        assert good_line.count("*") == 3
        assert bad_line.count("*") == 0

    def test_means_match_independent_recomputation(self):
        rng = np.random.default_rng(4)
        recs = [_rec(f"p{i}", rng.random(), rng.random(), rng.random(), rng.random())
                for i in range(5)]
        _, csv_text = report(recs)
        row = csv_text.strip().splitlines()[1].split(",")
        assert float(row[2]) == pytest.approx(np.mean([r.dsc_before for r in recs]), abs=1e-6)
        assert float(row[3]) == pytest.approx(np.mean([r.dsc_after for r in recs]), abs=1e-6)
        assert float(row[4]) == pytest.approx(np.mean([r.njd_percent for r in recs]), abs=1e-6)
        assert float(row[5]) == pytest.approx(np.mean([r.runtime_seconds for r in recs]), abs=1e-6)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            report([])
        with pytest.raises(ValueError):
            report(None, {"empty": []})

    def test_records_csv_schema(self):
        csv_text = evaluation.records_csv([_rec("p0", 0.1, 0.2, 0.3, 0.4)])
        assert csv_text.splitlines()[0] == "pair_id,dsc_before,dsc_after,njd_percent,runtime_s"
        assert csv_text.splitlines()[1].startswith("p0,0.1")
