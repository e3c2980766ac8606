"""Box suppression against hand traces and brute-force oracles."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsewin.boxes import (
    CnmsConfig,
    DetBox,
    cross_slice_nms,
    cross_slice_nms_multi,
    iou,
    nms,
    read_csv,
    read_jsonl,
    write_csv,
    write_jsonl,
)
from sparsewin.reference import ref_area_merge, ref_greedy_nms

RNG = np.random.default_rng


def random_boxes(rng, n, extent=100.0, cls_count=1, slice_id=0):
    boxes = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, extent * 0.8, 2)
        w, h = rng.uniform(1, extent * 0.4, 2)
        boxes.append(DetBox(x1, y1, x1 + w, y1 + h,
                            score=float(np.round(rng.uniform(0.05, 1.0), 6)),
                            cls=int(rng.integers(cls_count)),
                            slice_id=slice_id))
    return boxes


class TestDetBox:
    def test_degenerate_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            DetBox(0, 0, 0, 10, 0.5)
        with pytest.raises(ValueError, match="degenerate"):
            DetBox(5, 5, 2, 10, 0.5)

    def test_score_range(self):
        with pytest.raises(ValueError, match="score"):
            DetBox(0, 0, 1, 1, 1.5)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            DetBox(0, 0, float("inf"), 1, 0.5)


class TestIoU:
    def test_identical(self):
        b = DetBox(0, 0, 10, 10, 0.5)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(DetBox(0, 0, 1, 1, 0.5), DetBox(5, 5, 6, 6, 0.5)) == 0.0

    def test_half_overlap_arithmetic(self):
        a = DetBox(0, 0, 10, 10, 0.5)
        b = DetBox(5, 0, 15, 10, 0.5)
        assert abs(iou(a, b) - 50.0 / 150.0) < 1e-12

    def test_touching_edges_is_zero(self):
        assert iou(DetBox(0, 0, 1, 1, 0.5), DetBox(1, 0, 2, 1, 0.5)) == 0.0

    @given(st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_bounds_and_symmetry(self, seed):
        rng = RNG(seed)
        a, b = random_boxes(rng, 2)
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)


class TestNms:
    def test_empty(self):
        assert nms([], 0.5) == []

    def test_identical_boxes_keep_highest_score(self):
        hi = DetBox(0, 0, 10, 10, 0.9)
        lo = DetBox(0, 0, 10, 10, 0.8)
        assert nms([lo, hi], 0.5) == [hi]

    def test_matches_brute_force_oracle(self):
        rng = RNG(0)
        for trial in range(50):
            boxes = random_boxes(rng, 15, cls_count=2)
            out = nms(boxes, 0.4)
            expect = ref_greedy_nms(boxes, 0.4)
            assert out == expect, f"trial {trial}"

    def test_classes_do_not_suppress_each_other(self):
        a = DetBox(0, 0, 10, 10, 0.9, cls=0)
        b = DetBox(0, 0, 10, 10, 0.8, cls=1)
        assert nms([a, b], 0.5) == [a, b]

    def test_suppression_at_threshold_boundary(self):
        # IoU exactly at the threshold suppresses
        a = DetBox(0, 0, 10, 10, 0.9)
        b = DetBox(0, 0, 10, 5, 0.8)  # IoU 0.5 against a
        assert nms([a, b], 0.5) == [a]


class TestCrossSliceNms:
    def test_both_empty(self):
        assert cross_slice_nms([], []) == []

    def test_area_beats_score(self):
        small = DetBox(0, 0, 10, 10, 0.9, slice_id=0)
        large = DetBox(0, 0, 12, 12, 0.6, slice_id=1)
        assert abs(iou(small, large) - 100.0 / 144.0) < 1e-12
        cfg = CnmsConfig(iou_threshold=0.5)
        merged = cross_slice_nms([small], [large], cfg)
        assert merged == [large]
        conventional = nms([small, large], 0.5)
        assert conventional == [small]

    def test_non_overlapping_slices_union(self):
        b1 = [DetBox(0, 0, 10, 10, 0.9, slice_id=0)]
        b2 = [DetBox(50, 50, 60, 60, 0.8, slice_id=1)]
        merged = cross_slice_nms(b1, b2)
        assert merged == b1 + b2

    def test_local_stage_runs_before_union(self):
        # two fragments in one slice: local NMS keeps one before area merge
        b1 = [DetBox(0, 0, 10, 10, 0.9, slice_id=0),
              DetBox(0, 0, 10, 10, 0.5, slice_id=0)]
        merged = cross_slice_nms(b1, [])
        assert merged == [b1[0]]


class TestCrossSliceMulti:
    def test_single_set_equals_nms(self):
        boxes = random_boxes(RNG(1), 12)
        assert cross_slice_nms_multi([boxes]) == \
            ref_area_merge([boxes], 0.5, 0.5)

    def test_two_sets_consistency(self):
        rng = RNG(2)
        b1 = random_boxes(rng, 8, slice_id=0)
        b2 = random_boxes(rng, 8, slice_id=1)
        assert cross_slice_nms_multi([b1, b2]) == cross_slice_nms(b1, b2)

    def test_five_random_sets_match_oracle(self):
        rng = RNG(3)
        for trial in range(30):
            sets = [random_boxes(rng, int(rng.integers(0, 11)), slice_id=i)
                    for i in range(5)]
            cfg = CnmsConfig(iou_threshold=0.5, local_iou_threshold=0.5)
            out = cross_slice_nms_multi(sets, cfg)
            expect = ref_area_merge(sets, 0.5, 0.5)
            assert out == expect, f"trial {trial}"


class TestInvariants:
    def test_output_conflict_free_and_subset(self):
        rng = RNG(4)
        for tau in (0.3, 0.5, 0.7):
            cfg = CnmsConfig(iou_threshold=tau, local_iou_threshold=tau)
            sets = [random_boxes(rng, 10, slice_id=i, cls_count=2)
                    for i in range(3)]
            locally = [b for s in sets for b in nms(s, tau)]
            out = cross_slice_nms_multi(sets, cfg)
            for b in out:
                assert b in locally
            for i, a in enumerate(out):
                for b in out[i + 1:]:
                    if a.cls == b.cls:
                        assert iou(a, b) < tau

    def test_two_conflicting_boxes_larger_survives(self):
        rng = RNG(5)
        for _ in range(50):
            x1, y1 = rng.uniform(0, 50, 2)
            w, h = rng.uniform(10, 40, 2)
            grow = rng.uniform(1.01, 1.2)
            small = DetBox(x1, y1, x1 + w, y1 + h, float(rng.uniform(0.5, 1)))
            large = DetBox(x1, y1, x1 + w * grow, y1 + h * grow,
                           float(rng.uniform(0.01, 0.49)))
            if iou(small, large) < 0.5:
                continue
            out = cross_slice_nms([small], [large], CnmsConfig(0.5, 0.5))
            assert out == [large]

    def test_idempotence(self):
        rng = RNG(6)
        cfg = CnmsConfig(iou_threshold=0.5, local_iou_threshold=0.5)
        for _ in range(25):
            sets = [random_boxes(rng, 10, slice_id=i) for i in range(3)]
            once = cross_slice_nms_multi(sets, cfg)
            again = cross_slice_nms_multi([once], cfg)
            assert once == again


class TestBoxIO:
    def test_jsonl_round_trip(self):
        boxes = random_boxes(RNG(7), 5, cls_count=3, slice_id=2)
        buf = io.StringIO()
        write_jsonl(buf, boxes)
        buf.seek(0)
        assert read_jsonl(buf) == boxes

    def test_jsonl_schema_keys(self):
        buf = io.StringIO()
        write_jsonl(buf, [DetBox(1, 2, 3, 4, 0.5, cls=1, slice_id=7)])
        import json
        obj = json.loads(buf.getvalue())
        assert set(obj) == {"x1", "y1", "x2", "y2", "score", "class", "slice"}

    def test_csv_round_trip(self, tmp_path):
        boxes = random_boxes(RNG(8), 4)
        path = tmp_path / "boxes.csv"
        write_csv(path, boxes)
        assert read_csv(path) == boxes
