import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_array_equal

from occlutrack.geometry import BBox
from occlutrack.metrics import (
    EvalResult, OcclusionProfile, clear_mot, clear_mot_counts, eval_csv, format_table, idf1, idtp,
    occlusion_bin, occlusion_csv, occlusion_profile,
)
from occlutrack.motio import GtRecord, ResultRecord

from oracles import brute_clear_mot, brute_idtp, fuzz_instance


def gt_row(frame, oid, left=0.0, vis=1.0):
    return GtRecord(frame, oid, BBox(left, 0, 10, 10), visibility=vis)


def hyp_row(frame, oid, left=0.0):
    return ResultRecord(frame, oid, BBox(left, 0, 10, 10))


class TestClearMot:
    def test_perfect(self):
        gt = [gt_row(f, k, 30 * k) for f in (1, 2, 3) for k in (1, 2)]
        hyp = [hyp_row(g.frame, g.id + 10, g.box.left) for g in gt]
        r = clear_mot(gt, hyp)
        assert (r.mota, r.fp, r.fn, r.ids, r.idf1) == (1.0, 0, 0, 0, 1.0)

    def test_missed_frame(self):
        r = clear_mot([gt_row(1, 1), gt_row(2, 1)], [hyp_row(1, 7)])
        assert (r.fn, r.fp, r.ids) == (1, 0, 0)
        assert r.mota == 0.5

    def test_id_switch(self):
        r = clear_mot([gt_row(1, 1), gt_row(2, 1)], [hyp_row(1, 7), hyp_row(2, 8)])
        assert (r.fn, r.fp, r.ids) == (0, 0, 1)
        assert r.mota == 0.5

    def test_switch_counted_against_last_match_across_gap(self):
        gt = [gt_row(f, 1) for f in (1, 2, 3)]
        r = clear_mot(gt, [hyp_row(1, 7), hyp_row(3, 8)])
        assert (r.fn, r.ids) == (1, 1)

    def test_hyp_beyond_gt_range_is_fp(self):
        r = clear_mot([gt_row(1, 1)], [hyp_row(1, 1), hyp_row(9, 1)])
        assert (r.fp, r.fn) == (1, 0)

    def test_carry_over_beats_better_iou(self):
        # frame 2: hyp 8 fits gt better, but the frame-1 pair (1, 7) is still admissible
        gt = [gt_row(1, 1), gt_row(2, 1)]
        hyp = [hyp_row(1, 7), hyp_row(2, 7, 2.0), hyp_row(2, 8, 0.5)]
        r = clear_mot(gt, hyp)
        assert (r.ids, r.fp) == (0, 1)

    def test_threshold_boundary_is_inclusive(self):
        # a half-height box inside the gt box has IoU exactly 0.5
        gt = [GtRecord(1, 1, BBox(0, 0, 10, 10))]
        hyp = [ResultRecord(1, 1, BBox(0, 0, 10, 5))]
        assert clear_mot(gt, hyp).fn == 0

    def test_empty_gt_mota_is_nan(self):
        r = clear_mot([], [hyp_row(1, 1)])
        assert math.isnan(r.mota) and r.fp == 1

    @pytest.mark.parametrize("t", [0.0, -0.1, 1.5])
    def test_threshold_range(self, t):
        with pytest.raises(ValueError):
            clear_mot([gt_row(1, 1)], [], t)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            clear_mot([gt_row(1, 1), gt_row(1, 1, 50)], [])

    @pytest.mark.parametrize("seed", range(60))
    def test_agrees_with_enumeration(self, seed):
        gt, hyp = fuzz_instance(seed)
        fp, fn, ids, n, _ = clear_mot_counts(gt, hyp)
        assert (fp, fn, ids, n) == brute_clear_mot(gt, hyp)

    @pytest.mark.parametrize("seed", range(20))
    def test_mota_identity(self, seed):
        gt, hyp = fuzz_instance(seed + 1000)
        r = clear_mot(gt, hyp)
        assert r.mota == 1.0 - (r.fn + r.fp + r.ids) / r.gt_count
        assert r.gt_count == len(gt)


class TestIdf1:
    def test_perfect(self):
        gt = [gt_row(f, 1) for f in (1, 2)]
        assert idf1(gt, [hyp_row(f, 3) for f in (1, 2)]) == 1.0

    def test_empty_hyp(self):
        assert idf1([gt_row(1, 1)], []) == 0.0

    def test_both_empty(self):
        assert idf1([], []) == 1.0

    def test_split_trajectory(self):
        gt = [gt_row(f, 1) for f in range(1, 5)]
        hyp = [hyp_row(f, 1 if f <= 2 else 2) for f in range(1, 5)]
        assert idf1(gt, hyp) == 0.5

    @pytest.mark.parametrize("seed", range(60))
    def test_agrees_with_enumeration(self, seed):
        gt, hyp = fuzz_instance(seed + 500)
        assert idtp(gt, hyp) == brute_idtp(gt, hyp)

    @given(st.integers(0, 10_000))
    def test_in_unit_interval(self, seed):
        gt, hyp = fuzz_instance(seed)
        assert 0.0 <= idf1(gt, hyp) <= 1.0

    @given(st.integers(0, 10_000))
    def test_adding_a_correct_box_never_lowers_idtp(self, seed):
        gt, hyp = fuzz_instance(seed)
        # a fresh hyp id placed exactly on a gt box, in a frame where that id is unused
        g = gt[seed % len(gt)]
        extra = ResultRecord(g.frame, 99, g.box)
        assert idtp(gt, hyp + [extra]) >= idtp(gt, hyp)


class TestMerge:
    def test_counts_sum_and_ratios_recomputed(self):
        a = clear_mot([gt_row(1, 1), gt_row(2, 1)], [hyp_row(1, 7)])
        b = clear_mot([gt_row(1, 1), gt_row(2, 1)], [hyp_row(1, 7), hyp_row(2, 7)])
        m = EvalResult.merge([a, b])
        assert (m.fn, m.gt_count) == (1, 4)
        assert m.mota == 0.75
        assert m.idf1 == 2 * (a.idtp + b.idtp) / (4 + 3)


class TestOcclusionBins:
    @pytest.mark.parametrize("vis,k", [(1.0, 0), (0.95, 0), (0.9, 1), (0.31, 6), (0.3, 7), (0.05, 9), (0.0, 9)])
    def test_bin_of_visibility(self, vis, k):
        assert occlusion_bin(vis) == k

    def test_visibility_range(self):
        with pytest.raises(ValueError):
            occlusion_bin(1.2)

    def test_fully_visible_perfect(self):
        gt = [gt_row(f, 1) for f in (1, 2, 3)]
        prof = occlusion_profile(gt, [hyp_row(f, 4) for f in (1, 2, 3)])
        assert prof.occurrences[0] == 3 and prof.fractions[0] == 1.0
        assert np.isnan(prof.fractions[1:]).all()

    def test_heavily_occluded_miss(self):
        prof = occlusion_profile([gt_row(1, 1, vis=0.05)], [hyp_row(1, 1, 50.0)])
        assert prof.occurrences[9] == 1 and prof.fractions[9] == 0.0

    def test_any_hyp_id_counts(self):
        prof = occlusion_profile([gt_row(1, 1, vis=0.5)], [hyp_row(1, 3, 50.0), hyp_row(1, 4)])
        assert prof.tracked[5] == 1

    @given(st.integers(0, 10_000))
    def test_occurrences_total_gt(self, seed):
        gt, hyp = fuzz_instance(seed)
        prof = occlusion_profile(gt, hyp)
        assert prof.occurrences.sum() == len(gt)
        assert (prof.tracked <= prof.occurrences).all()

    def test_pooled_fraction(self):
        p = OcclusionProfile(10, np.array([0] * 7 + [2, 2, 0]), np.array([0] * 7 + [1, 2, 0]))
        assert p.pooled_fraction(0.7) == 0.75
        assert math.isnan(p.pooled_fraction(0.0, 0.3))

    def test_add(self):
        p = OcclusionProfile(10, np.ones(10, int), np.zeros(10, int))
        s = p + p
        assert_array_equal(s.occurrences, 2 * np.ones(10))
        with pytest.raises(ValueError):
            p + OcclusionProfile(5)


class TestReports:
    def test_eval_csv(self):
        r = EvalResult.from_counts(1, 2, 0, 10, 7, 9)
        assert eval_csv([("full", r)]) == "variant,mota,idf1,fp,fn,ids,gt_count\nfull,0.700000,0.736842,1,2,0,10\n"

    def test_occlusion_csv_columns(self):
        p = occlusion_profile([gt_row(1, 1, vis=0.05)], [])
        lines = occlusion_csv([("x", p)]).splitlines()
        assert lines[0] == "bin_low,bin_high,occurrences,tracked_fraction,variant"
        assert lines[1] == "0.0,0.1,0,nan,x"
        assert lines[-1] == "0.9,1.0,1,0.000000,x"

    def test_table(self):
        out = format_table(["a", "b"], [["x", 0.5]])
        assert out.splitlines()[2].split() == ["x", "0.5000"]
