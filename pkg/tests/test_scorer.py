import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import max_matching_size, pixel_iou

from buildfuse.geometry import rasterize
from buildfuse.polygonize import Polygon, PolygonSet
from buildfuse.scorer import (
    MatchReport,
    aggregate,
    format_table,
    iou_matrix,
    match_polygons,
    polygon_iou,
    prf,
    score_run,
)

log = logging.getLogger(__name__)


def rect(x0, y0, x1, y1):
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]


def random_instance(rng, max_side=6, size=24):
    gts, taken = [], np.zeros((size, size), bool)
    for _ in range(rng.integers(0, max_side + 1)):
        for _attempt in range(20):
            x0, y0 = rng.integers(0, size - 3, 2)
            w, h = rng.integers(2, 7, 2)
            x1, y1 = min(x0 + w, size), min(y0 + h, size)
            if not taken[y0:y1, x0:x1].any():
                taken[y0:y1, x0:x1] = True
                gts.append(rect(int(x0), int(y0), int(x1), int(y1)))
                break
    preds = []
    for _ in range(rng.integers(0, max_side + 1)):
        if gts and rng.random() < 0.7:
            g = gts[rng.integers(len(gts))]
            x0, y0 = g[0]
            x1, y1 = g[2]
            dx0, dy0, dx1, dy1 = rng.integers(-2, 3, 4)
            px0, py0 = max(0, x0 + dx0), max(0, y0 + dy0)
            px1, py1 = max(px0 + 1, x1 + dx1), max(py0 + 1, y1 + dy1)
            preds.append(rect(int(px0), int(py0), int(px1), int(py1)))
        else:
            x0, y0 = rng.integers(0, size - 3, 2)
            w, h = rng.integers(1, 7, 2)
            preds.append(rect(int(x0), int(y0), int(x0 + w), int(y0 + h)))
    return preds, gts


def dense_iou(preds, gts):
    out = np.zeros((len(preds), len(gts)))
    for (i, j), v in iou_matrix(preds, gts).items():
        out[i, j] = v
    return out


class TestPolygonIoU:
    def test_identical(self):
        assert polygon_iou(rect(0, 0, 3, 2), rect(0, 0, 3, 2)) == 1.0

    def test_disjoint(self):
        assert polygon_iou(rect(0, 0, 1, 1), rect(2, 2, 3, 3)) == 0.0

    def test_half_overlapping_unit_squares(self):
        assert polygon_iou(rect(0, 0, 1, 1), [[0.5, 0], [1.5, 0], [1.5, 1], [0.5, 1], [0.5, 0]]) == pytest.approx(1 / 3)

    def test_degenerate(self):
        with pytest.raises(ValueError):
            polygon_iou(rect(0, 0, 0, 3), rect(0, 0, 1, 1))

    def test_pinched_ring(self):
        # two pixels touching at a corner, traced as one ring through the pinch vertex
        ring = [[0, 0], [1, 0], [1, 1], [2, 1], [2, 2], [1, 2], [1, 1], [0, 1], [0, 0]]
        assert polygon_iou(ring, rect(0, 0, 1, 1)) == pytest.approx(0.5)

    def test_matches_pixel_iou_on_integer_rects(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = random_rect(rng)
            b = random_rect(rng)
            ma, mb = rasterize([a], 16, 16), rasterize([b], 16, 16)
            assert polygon_iou(a, b) == pytest.approx(pixel_iou(ma, mb), abs=1e-12)


def random_rect(rng):
    x0, y0 = rng.integers(0, 12, 2)
    w, h = rng.integers(1, 5, 2)
    return rect(int(x0), int(y0), int(x0 + w), int(y0 + h))


class TestMatch:
    def test_identical_sets(self):
        polys = [rect(0, 0, 2, 2), rect(4, 4, 7, 6), rect(10, 0, 12, 5)]
        r = match_polygons(polys, polys)
        assert (r.tp, r.fp, r.fn, r.f_score) == (3, 0, 0, 1.0)

    def test_two_of_three(self):
        gts = [rect(0, 0, 4, 4), rect(10, 10, 14, 14), rect(20, 0, 24, 4)]
        preds = [rect(0, 0, 4, 3), rect(10, 10, 14, 13), rect(30, 30, 32, 32)]
        r = match_polygons(preds, gts)
        assert (r.tp, r.fp, r.fn) == (2, 1, 1)
        assert r.precision == r.recall == r.f_score == pytest.approx(2 / 3)
        assert r.fp_indices == [2] and r.fn_indices == [2]

    def test_strictly_above_threshold(self):
        # IoU exactly 0.5 is not a match
        r = match_polygons([rect(0, 0, 2, 2)], [rect(0, 0, 2, 1)])
        assert r.tp == 0

    def test_tie_break_lower_pred_index(self):
        gt = [rect(0, 0, 4, 4)]
        preds = [rect(0, 0, 4, 3), rect(0, 1, 4, 4)]
        r = match_polygons(preds, gt)
        assert r.pairs[0][:2] == (0, 0)

    def test_one_to_one(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            preds, gts = random_instance(rng)
            r = match_polygons(preds, gts, 0.2)
            assert len({i for i, _, _ in r.pairs}) == len(r.pairs) == len({j for _, j, _ in r.pairs})
            assert all(v > 0.2 for _, _, v in r.pairs)
            assert r.tp + r.fp == len(preds) and r.tp + r.fn == len(gts)

    def test_greedy_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(2)
        instances = [random_instance(rng) for _ in range(200)]
        divergences = {}
        for thr in (0.5, 0.3, 0.1):
            count = 0
            for k, (preds, gts) in enumerate(instances):
                greedy = match_polygons(preds, gts, thr).tp
                best = max_matching_size(dense_iou(preds, gts), thr)
                if greedy != best:
                    count += 1
                    log.info("threshold %.1f instance %d: greedy %d, optimum %d", thr, k, greedy, best)
            divergences[thr] = count
        log.info("divergences per threshold: %s", divergences)
        assert divergences[0.5] == 0

    def test_score_order(self):
        gts = [rect(0, 0, 4, 4)]
        preds = [
            Polygon(rect(0, 0, 4, 3), 12, 1, score=0.6),
            Polygon(rect(0, 0, 4, 4), 16, 2, score=0.9),
        ]
        assert match_polygons(preds, gts, order="iou").pairs[0][0] == 1
        weak_first = [Polygon(rect(0, 0, 4, 4), 16, 1, score=0.2), Polygon(rect(0, 0, 4, 3), 12, 2, score=0.9)]
        assert match_polygons(weak_first, gts, order="score").pairs[0][0] == 1
        with pytest.raises(ValueError):
            match_polygons(preds, gts, order="area")

    def test_accepts_polygon_sets(self):
        ps = PolygonSet.from_rings([rect(0, 0, 2, 2)])
        assert match_polygons(ps, ps).tp == 1


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_swap_symmetry(seed):
    preds, gts = random_instance(np.random.default_rng(seed))
    a = match_polygons(preds, gts)
    b = match_polygons(gts, preds)
    assert (a.tp, a.fp, a.fn) == (b.tp, b.fn, b.fp)
    assert a.f_score == b.f_score


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lo=st.floats(0, 0.95), hi=st.floats(0, 0.95))
def test_threshold_monotone(seed, lo, hi):
    lo, hi = sorted((lo, hi))
    preds, gts = random_instance(np.random.default_rng(seed))
    assert match_polygons(preds, gts, hi).tp <= match_polygons(preds, gts, lo).tp


class TestFScore:
    def test_micro_average(self):
        agg = aggregate([MatchReport.from_counts(1, 0, 0), MatchReport.from_counts(1, 1, 1)])
        assert agg.precision == agg.recall == agg.f_score == pytest.approx(2 / 3)

    def test_no_predictions(self):
        run = score_run([[], []], [[rect(0, 0, 2, 2)], [rect(3, 3, 5, 5)]])
        assert run.aggregate.f_score == 0.0

    def test_all_empty(self):
        assert prf(0, 0, 0) == (1.0, 1.0, 1.0)

    def test_zero_when_no_tp(self):
        assert prf(0, 3, 2)[2] == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            score_run([[]], [[], []])

    def test_tile_ids(self):
        run = score_run([[]], [[]], tile_ids=["a"])
        assert run.per_tile[0].tile_id == "a"


class TestTable:
    def test_rows_and_gain(self):
        reports = {
            "average": MatchReport.from_counts(6805, 3195, 3195),
            "deep": MatchReport.from_counts(7080, 2920, 2920),
        }
        table = format_table(reports)
        lines = table.splitlines()
        assert lines[0].split()[0] == "fusion"
        assert lines[1].split()[0] == "average" and lines[1].split()[-1] == "-"
        assert lines[2].split()[-1] == "+4.04%"

    def test_zero_baseline(self):
        table = format_table({"average": MatchReport.from_counts(0, 1, 1), "deep": MatchReport.from_counts(1, 0, 0)})
        assert table.splitlines()[2].split()[-1] == "-"
