import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_array_equal

from convdpm.nms import (AssignmentSet, OverlapPolicy, containment, iou, neighborhood,
                         neighborhood_of_box, overlap, read_detections, suppress,
                         suppression_violations, write_detections)
from oracles import frac_overlap, greedy_nms


def int_boxes(r, n, size=20):
    x1 = r.integers(0, size, n)
    y1 = r.integers(0, size, n)
    w = r.integers(1, 10, n)
    h = r.integers(1, 10, n)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=-1).astype(np.float64)


def random_set(r, n=50, classes=2, integer=True):
    boxes = int_boxes(r, n) if integer else np.sort(r.uniform(0, 30, (n, 2, 2)), axis=1).transpose(
        0, 2, 1).reshape(n, 4)[:, [0, 2, 1, 3]]
    labels = r.integers(1, classes + 1, n)
    scores = np.round(r.normal(size=n), 1)          # coarse scores create ties
    keys = np.stack([r.integers(0, 3, n), labels - 1, r.integers(0, 9, n), np.arange(n)], -1)
    return AssignmentSet(boxes, labels, scores, keys)


box_st = st.tuples(st.integers(0, 30), st.integers(0, 30), st.integers(1, 15),
                   st.integers(1, 15)).map(lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


class TestOverlap:
    def test_identical(self):
        b = (1.0, 2.0, 5.0, 9.0)
        assert overlap(b, b, True) == 1.0 and overlap(b, b, False) == 1.0

    def test_disjoint(self):
        assert overlap((0, 0, 1, 1), (2, 2, 3, 3), True) == 0.0
        assert overlap((0, 0, 1, 1), (2, 2, 3, 3), False) == 0.0

    def test_half_box(self):
        b, b2 = (0, 0, 10, 10), (0, 0, 5, 10)
        assert overlap(b, b2, False) == 0.5
        assert overlap(b, b2, True) == 1.0

    @given(a=box_st, b=box_st)
    def test_matches_rational_oracle(self, a, b):
        for same in (True, False):
            assert overlap(a, b, same) == float(frac_overlap(a, b, same))

    @given(a=box_st, b=box_st)
    def test_symmetric_and_bounded(self, a, b):
        for same in (True, False):
            v = overlap(a, b, same)
            assert 0.0 <= v <= 1.0
            assert v == overlap(b, a, same)
        assert overlap(a, b, True) >= overlap(a, b, False)

    def test_vectorised(self):
        box = np.array([0.0, 0.0, 4.0, 4.0])
        others = np.array([[0, 0, 2, 4], [2, 2, 6, 6], [10, 10, 11, 11]], dtype=float)
        np.testing.assert_allclose(iou(box, others), [0.5, 4 / 28, 0.0])
        np.testing.assert_allclose(containment(box, others), [1.0, 0.25, 0.0])

    def test_policy_validated(self):
        with pytest.raises(ValueError):
            OverlapPolicy(same_class=0.0)
        with pytest.raises(ValueError):
            OverlapPolicy(gt=1.5)


class TestSuppress:
    def test_same_class_containment(self):
        a = AssignmentSet([[0, 0, 10, 10], [4, 0, 14, 10]], [1, 1], [2.0, 1.0])
        assert overlap(a.boxes[0], a.boxes[1], True) == 0.6
        out = suppress(a)
        assert_array_equal(out.scores, [2.0])
        assert out.tag == "A"

    def test_different_class_below_threshold(self):
        a = AssignmentSet([[0, 0, 10, 10], [0, 0, 5, 10]], [1, 2], [2.0, 1.0])
        assert len(suppress(a)) == 2

    def test_different_class_above_threshold(self):
        a = AssignmentSet([[0, 0, 10, 10], [0, 0, 10, 8]], [1, 2], [1.0, 2.0])
        out = suppress(a)
        assert_array_equal(out.labels, [2])

    def test_brute_force_oracle(self):
        r = np.random.default_rng(0)
        for _ in range(200):
            a = random_set(r)
            _, keep = suppress(a, return_index=True)
            assert keep.tolist() == greedy_nms(a.boxes, a.labels, a.scores, a.keys)

    def test_brute_force_oracle_float_boxes(self):
        r = np.random.default_rng(1)
        for _ in range(50):
            a = random_set(r, integer=False)
            _, keep = suppress(a, return_index=True)
            assert keep.tolist() == greedy_nms(a.boxes, a.labels, a.scores, a.keys)

    def test_tie_break_by_class_then_scale(self):
        boxes = [[0, 0, 10, 10]] * 3
        keys = [[1, 1, 0, 0], [0, 1, 5, 5], [2, 0, 9, 9]]
        a = AssignmentSet(boxes, [1, 1, 1], [1.0, 1.0, 1.0], keys)
        _, keep = suppress(a, return_index=True)
        # class 0 first, then the lower scale of class 1
        assert keep.tolist() == [2]
        a2 = AssignmentSet(boxes[:2], [1, 1], [1.0, 1.0], keys[:2])
        assert suppress(a2, return_index=True)[1].tolist() == [1]

    @given(seed=st.integers(0, 10**6), shift=st.floats(-50, 50))
    def test_shift_invariance_and_validity(self, seed, shift):
        a = random_set(np.random.default_rng(seed), n=30)
        out, keep = suppress(a, return_index=True)
        assert set(keep.tolist()) <= set(range(len(a)))
        assert suppression_violations(out) == []
        shifted = AssignmentSet(a.boxes, a.labels, a.scores + shift, a.keys)
        assert set(suppress(shifted, return_index=True)[1].tolist()) == set(keep.tolist())

    @given(seed=st.integers(0, 10**6))
    def test_every_dropped_box_is_covered(self, seed):
        a = random_set(np.random.default_rng(seed), n=30)
        _, keep = suppress(a, return_index=True)
        pol = OverlapPolicy()
        for i in set(range(len(a))) - set(keep.tolist()):
            nb = set(neighborhood_of_box(a.boxes[i], a.labels[i], a.subset(keep), pol).tolist())
            assert any(a.scores[keep[j]] >= a.scores[i] for j in nb)

    def test_deterministic(self):
        a = random_set(np.random.default_rng(9))
        assert_array_equal(suppress(a, return_index=True)[1], suppress(a, return_index=True)[1])

    def test_empty(self):
        assert len(suppress(AssignmentSet.empty())) == 0


class TestNeighborhood:
    def test_alone(self):
        a = AssignmentSet([[0, 0, 4, 4]], [1], [0.0])
        assert neighborhood(0, a, OverlapPolicy()).tolist() == [0]

    def test_grid_matches_pairwise_oracle(self):
        grid = [(x, y, x + 6, y + 6) for x in range(0, 10, 2) for y in range(0, 10, 2)]
        labels = [1 + (k % 2) for k in range(len(grid))]
        cand = AssignmentSet([(2, 2, 8, 8)] + grid, [1] + labels, np.zeros(len(grid) + 1))
        pol = OverlapPolicy()
        got = set(neighborhood(0, cand, pol).tolist())
        want = {k for k in range(len(cand))
                if frac_overlap(cand.boxes[0], cand.boxes[k], cand.labels[k] == 1)
                >= (pol.same_class if cand.labels[k] == 1 else pol.diff_class)}
        assert got == want and 0 in got

    @given(seed=st.integers(0, 10**6), t1=st.floats(0.05, 1.0), t2=st.floats(0.05, 1.0))
    def test_monotone_in_threshold(self, seed, t1, t2):
        lo, hi = sorted((t1, t2))
        a = random_set(np.random.default_rng(seed), n=25)
        small = set(neighborhood(0, a, OverlapPolicy(hi, hi)).tolist())
        big = set(neighborhood(0, a, OverlapPolicy(lo, lo)).tolist())
        assert small <= big and 0 in small


class TestDetectionFile:
    def test_round_trip(self, tmp_path):
        recs = [("img0", "A", 0.1 + 0.2, (1.5, 2.0, 10.25, 11.0)), ("img1", "B", -3.0, (0, 0, 1, 1))]
        path = tmp_path / "det.txt"
        write_detections(path, recs)
        back = read_detections(path)
        assert back[0] == ("img0", "A", 0.1 + 0.2, (1.5, 2.0, 10.25, 11.0))
        assert len(back) == 2

    def test_bad_line(self, tmp_path):
        path = tmp_path / "det.txt"
        path.write_text("img0 A 1.0 2 3\n")
        with pytest.raises(ValueError, match="7 fields"):
            read_detections(path)
