from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracle
from tcs3d.metrics import (Box, DetectionRecord, EvalReport, Evaluator, ap_from_outcomes,
                           average_precision, evaluate, format_report, fr_mr, iou,
                           match_frame, mean_average_precision, read_report, write_report)


def gt(cls, box, frame=0, clip="v"):
    return DetectionRecord(clip, frame, cls, Box(*box))


def pred(cls, box, score, frame=0, clip="v"):
    return DetectionRecord(clip, frame, cls, Box(*box), score)


FULL = (0.0, 0.0, 1.0, 1.0)


class TestBox:
    def test_rejects_empty_and_out_of_range(self):
        with pytest.raises(ValueError):
            Box(0.5, 0.1, 0.5, 0.9)
        with pytest.raises(ValueError):
            Box(-0.1, 0.0, 0.5, 0.5)
        with pytest.raises(ValueError):
            Box(0.0, 0.0, 1.2, 0.5)

    def test_record_rejects_negative_class(self):
        with pytest.raises(ValueError):
            DetectionRecord("v", 0, -1, Box(*FULL))


class TestIou:
    def test_identical(self):
        assert iou(Box(*FULL), Box(*FULL)) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 0.2, 0.2), Box(0.5, 0.5, 1, 1)) == 0.0

    def test_touching_edges_have_no_overlap(self):
        assert iou(Box(0, 0, 0.5, 1), Box(0.5, 0, 1, 1)) == 0.0

    def test_one_seventh_fixture(self):
        # unit cells: overlap 1, union 4 + 4 - 1 = 7
        a, b = Box(0, 0, 2 / 3, 2 / 3), Box(1 / 3, 1 / 3, 1, 1)
        assert iou(a, b) == pytest.approx(1 / 7, abs=1e-12)
        assert float(oracle.exact_iou(a.as_tuple(), b.as_tuple())) == pytest.approx(1 / 7, abs=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=8, max_size=8))
    def test_matches_shapely_and_is_symmetric(self, v):
        xa, xb = sorted(v[0:2]), sorted(v[2:4])
        ya, yb = sorted(v[4:6]), sorted(v[6:8])
        if xa[0] == xa[1] or xb[0] == xb[1] or ya[0] == ya[1] or yb[0] == yb[1]:
            return
        a = Box(xa[0], ya[0], xa[1], ya[1])
        b = Box(xb[0], yb[0], xb[1], yb[1])
        o = iou(a, b)
        assert 0.0 <= o <= 1.0
        assert o == iou(b, a)
        assert o == pytest.approx(oracle.shapely_iou(a.as_tuple(), b.as_tuple()), abs=1e-9)


class TestMatching:
    def test_clean_match(self):
        g = [gt(0, (0, 0, 0.5, 1.0))]
        # overlap 0.3 of union 0.5 -> 0.6
        p = [pred(0, (0.2, 0, 0.5, 1.0), 0.9)]
        m = match_frame(g, p)
        assert (m.tp, m.fp, m.fn) == (1, 0, 0)

    def test_higher_score_wins(self):
        g = [gt(0, FULL)]
        p = [pred(0, FULL, 0.4), pred(0, (0, 0, 0.8, 1.0), 0.9)]
        m = match_frame(g, p)
        assert m.pred_tp == [False, True]
        assert (m.tp, m.fp, m.fn) == (1, 1, 0)

    def test_wrong_class_is_fp_and_fn(self):
        m = match_frame([gt(0, FULL)], [pred(1, FULL, 0.9)])
        assert (m.tp, m.fp, m.fn) == (0, 1, 1)

    def test_exact_half_overlap_counts(self):
        m = match_frame([gt(0, FULL)], [pred(0, (0, 0, 0.5, 1.0), 0.9)])
        assert m.tp == 1

    def test_rejects_mixed_frames(self):
        with pytest.raises(ValueError):
            match_frame([gt(0, FULL, frame=0)], [pred(0, FULL, 0.5, frame=1)])

    def test_exhaustive_small_cases_agree_with_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            g_rows, p_rows = oracle.random_instance(rng, max_boxes=3)
            frames = oracle.to_frames(g_rows, p_rows)
            for (clip, f), (gs, ps) in frames.items():
                m = match_frame([gt(c, b, f) for c, b in gs], [pred(c, b, s, f) for c, b, s in ps])
                assert m.pred_tp == oracle.match(gs, ps)


class TestAveragePrecision:
    def test_five_sixths_fixture(self):
        # ranked TP, FP, TP against two ground truths
        ap = ap_from_outcomes(2, [(0.9, True, 0), (0.8, False, 1), (0.7, True, 2)])
        assert ap == pytest.approx(5 / 6, abs=1e-12)
        assert oracle.ap_by_definition(2, [True, False, True]) == Fraction(5, 6)

    def test_perfect_detector(self):
        g = [gt(0, FULL, frame=i) for i in range(3)]
        p = [pred(0, FULL, 0.9 - 0.1 * i, frame=i) for i in range(3)]
        assert average_precision(0, g, p) == 1.0

    def test_single_miss(self):
        g = [gt(0, (0, 0, 0.2, 0.2))]
        p = [pred(0, (0.5, 0.5, 1, 1), 0.9)]
        assert average_precision(0, g, p) == 0.0

    def test_no_ground_truth_is_none(self):
        assert average_precision(3, [gt(0, FULL)], [pred(3, FULL, 0.9)]) is None

    def test_map_over_classes_with_gt(self):
        g = [gt(0, FULL), gt(1, (0, 0, 0.2, 0.2))]
        p = [pred(0, FULL, 0.9)]
        assert mean_average_precision(g, p) == 0.5

    def test_map_single_perfect_class(self):
        assert mean_average_precision([gt(2, FULL)], [pred(2, FULL, 0.7)]) == 1.0

    def test_map_needs_some_ground_truth(self):
        with pytest.raises(ValueError):
            mean_average_precision([], [pred(0, FULL, 0.9)])


class TestRates:
    def test_perfect(self):
        g = [gt(c, FULL) for c in range(3)]
        p = [pred(c, FULL, 0.9) for c in range(3)]
        assert fr_mr(g, p) == (0.0, 0.0)

    def test_false_rate_fixture(self):
        # frame 0 carries two false positives, frame 1 none
        g = [gt(0, FULL, frame=0), gt(0, FULL, frame=1)]
        p = [pred(0, FULL, 0.9, frame=0), pred(1, FULL, 0.8, frame=0), pred(2, FULL, 0.7, frame=0),
             pred(0, FULL, 0.9, frame=1)]
        fr, mr = fr_mr(g, p)
        assert fr == pytest.approx(0.125, abs=1e-15)
        assert mr == 0.0

    def test_miss_rate_fixture(self):
        g = [gt(0, FULL, frame=0), gt(4, FULL, frame=1)]
        fr, mr = fr_mr(g, [])
        assert (fr, mr) == (0.0, 0.125)

    def test_below_threshold_predictions_are_dropped(self):
        g = [gt(0, FULL)]
        fr, mr = fr_mr(g, [pred(0, FULL, 0.49)])
        assert (fr, mr) == (0.0, 0.125)
        assert fr_mr(g, [pred(0, FULL, 0.5)]) == (0.0, 0.0)


class TestReport:
    def test_report_round_trip(self, tmp_path):
        g = [gt(0, FULL), gt(1, FULL, frame=1)]
        p = [pred(0, FULL, 0.9), pred(5, FULL, 0.6, frame=1)]
        rep = evaluate(g, p)
        assert isinstance(rep, EvalReport)
        path = tmp_path / "r.txt"
        write_report(path, rep)
        back = read_report(path)
        assert back["map"] == rep.map and back["fr"] == rep.fr and back["mr"] == rep.mr
        assert back["ap.0"] == 1.0 and back["ap.1"] == 0.0 and back["ap.5"] is None
        assert "mAP@0.5" in format_report(rep)

    def test_counts(self):
        g = [gt(0, FULL)]
        p = [pred(0, FULL, 0.9), pred(0, FULL, 0.8)]
        rep = Evaluator(g, p).report()
        assert rep.counts[0] == {"tp": 1, "fp": 1, "fn": 0}

    def test_class_out_of_range(self):
        with pytest.raises(ValueError):
            Evaluator([gt(8, FULL)], [])


def compare_with_oracle(rng):
    g_rows, p_rows = oracle.random_instance(rng)
    g = [gt(c, b, f, clip) for clip, f, c, b, _ in g_rows]
    p = [pred(c, b, s, f, clip) for clip, f, c, b, s in p_rows]
    rep = evaluate(g, p)
    ref_ap, ref_map, ref_fr, ref_mr = oracle.evaluate(oracle.to_frames(g_rows, p_rows))
    err = 0.0
    for a, r in zip(rep.per_class_ap, ref_ap):
        assert (a is None) == (r is None)
        if a is not None:
            err = max(err, abs(a - float(r)))
    err = max(err, abs(rep.map - float(ref_map)), abs(rep.fr - float(ref_fr)),
              abs(rep.mr - float(ref_mr)))
    return err


def test_random_instances_match_oracle():
    rng = np.random.default_rng(11)
    assert max(compare_with_oracle(rng) for _ in range(200)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_ranges(seed):
    rng = np.random.default_rng(seed)
    g_rows, p_rows = oracle.random_instance(rng)
    rep = evaluate([gt(c, b, f) for _, f, c, b, _ in g_rows],
                   [pred(c, b, s, f) for _, f, c, b, s in p_rows])
    assert 0.0 <= rep.map <= 1.0
    per_frame = max(sum(1 for r in g_rows if r[1] == f) for f in {r[1] for r in g_rows})
    assert rep.fr >= 0.0
    assert 0.0 <= rep.mr <= per_frame / 8
    assert all(a is None or 0.0 <= a <= 1.0 for a in rep.per_class_ap)
