import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tempofuse.boxgen import DetectionBox
from tempofuse.metrics import (ConfusionCounts, MetricsError, MetricsReport, accumulate_confusion,
                               average_precision, class_average_precision, compute_iou,
                               compute_map, compute_miou, compute_prf, mean_average_precision)

REFERENCE_AP = {"knife": 0.9610, "razor": 0.9051, "shuriken": 0.9706, "gun": 0.9322}


def naive_counts(pred, true, n):
    tp, fp, fn, tn = (np.zeros(n, dtype=np.int64) for _ in range(4))
    for r in range(pred.shape[0]):
        for c in range(pred.shape[1]):
            for k in range(n):
                p, t = pred[r, c] == k, true[r, c] == k
                if p and t:
                    tp[k] += 1
                elif p:
                    fp[k] += 1
                elif t:
                    fn[k] += 1
                else:
                    tn[k] += 1
    return tp, fp, fn, tn


def counts_from(tp, fp, fn, tn=None):
    tp, fp, fn = (np.asarray(v, dtype=np.int64) for v in (tp, fp, fn))
    tn = np.zeros_like(tp) if tn is None else np.asarray(tn, dtype=np.int64)
    return ConfusionCounts(tp, fp, fn, tn)


def box(r0, c0, r1, c1, conf=1.0, cls=1, image="a"):
    return DetectionBox(cls, r0, r1, c0, c1, confidence=conf, image_id=image)


# -- confusion ---------------------------------------------------------------

def test_perfect_prediction():
    m = np.random.default_rng(0).integers(0, 4, (9, 9))
    c = accumulate_confusion(m, m, 4)
    assert not c.fp.any() and not c.fn.any()


def test_total_confusion():
    c = accumulate_confusion(np.zeros((10, 10), int), np.ones((10, 10), int), 2)
    assert c.tp[1] == 0 and c.fn[1] == 100
    assert c.fp[0] == 100


def test_against_naive_loop():
    rng = np.random.default_rng(1)
    pred, true = rng.integers(0, 5, (16, 16)), rng.integers(0, 5, (16, 16))
    c = accumulate_confusion(pred, true, 5)
    for got, want in zip((c.tp, c.fp, c.fn, c.tn), naive_counts(pred, true, 5)):
        np.testing.assert_array_equal(got, want)
    assert np.all(c.tp + c.fp + c.fn + c.tn == 256)


def test_additive():
    rng = np.random.default_rng(2)
    a = [rng.integers(0, 3, (6, 5)) for _ in range(2)]
    b = [rng.integers(0, 3, (4, 4)) for _ in range(2)]
    merged = accumulate_confusion(a[0], a[1], 3, accumulate_confusion(b[0], b[1], 3))
    summed = accumulate_confusion(a[0], a[1], 3) + accumulate_confusion(b[0], b[1], 3)
    for f in ("tp", "fp", "fn", "tn"):
        np.testing.assert_array_equal(getattr(merged, f), getattr(summed, f))


def test_confusion_errors():
    with pytest.raises(MetricsError):
        accumulate_confusion(np.zeros((2, 2), int), np.zeros((3, 2), int), 2)
    with pytest.raises(MetricsError):
        accumulate_confusion(np.full((2, 2), 3), np.zeros((2, 2), int), 3)


# -- IoU / PRF ---------------------------------------------------------------

def test_iou_examples():
    c = counts_from([0, 3], [0, 1], [0, 1])
    assert compute_iou(c, 1) == pytest.approx(0.6)
    assert compute_iou(counts_from([0, 5], [0, 0], [0, 0]), 1) == 1.0
    assert compute_iou(counts_from([0, 0], [0, 2], [0, 1]), 1) == 0.0
    assert math.isnan(compute_iou(counts_from([0, 0], [0, 0], [0, 0]), 1))


def test_miou_examples():
    # IoU 0.8 and 0.6
    c = counts_from([0, 8, 6], [0, 1, 2], [0, 1, 2])
    assert compute_miou(c) == pytest.approx(0.7)
    assert compute_miou(counts_from([50, 9], [0, 1], [0, 0])) == pytest.approx(0.9)


def test_miou_excludes_background_and_absent_classes():
    c = counts_from([0, 8, 0], [5, 1, 0], [5, 1, 0])
    assert compute_miou(c) == pytest.approx(0.8)


def test_miou_needs_suspicious_truth():
    with pytest.raises(MetricsError):
        compute_miou(counts_from([10, 0], [0, 3], [3, 0]))


def test_prf_examples():
    prf = compute_prf(counts_from([0, 9], [0, 1], [0, 1], [0, 0]))
    assert (prf.recall, prf.precision, prf.f_score) == pytest.approx((0.9, 0.9, 0.9))
    perfect = compute_prf(counts_from([5, 7], [0, 0], [0, 0], [7, 5]))
    assert (perfect.recall, perfect.precision, perfect.f_score, perfect.accuracy) == (1.0, 1.0, 1.0, 1.0)


def test_prf_degenerate_precision():
    prf = compute_prf(counts_from([10, 0], [0, 0], [0, 4], [4, 10]))
    assert prf.precision == 0.0 and prf.f_score == 0.0
    assert "precision" in prf.degenerate


def test_prf_micro_over_suspicious_classes():
    c = counts_from([100, 3, 5], [1, 1, 2], [2, 2, 0], [0, 0, 0])
    prf = compute_prf(c)
    assert prf.recall == pytest.approx(8 / 10)
    assert prf.precision == pytest.approx(8 / 11)


def test_harmonic_mean_of_reference_values():
    # reference recall 0.9357 and precision 0.9587 give F 0.9471; the reference F is 0.9431
    r, p = 0.9357, 0.9587
    assert 2 * r * p / (r + p) == pytest.approx(0.9471, abs=5e-5)


@pytest.mark.parametrize("seed", range(20))
def test_scores_against_naive_loop(seed):
    rng = np.random.default_rng(seed)
    pred, true = rng.integers(0, 4, (16, 16)), rng.integers(0, 4, (16, 16))
    tp, fp, fn, tn = naive_counts(pred, true, 4)
    c = accumulate_confusion(pred, true, 4)
    for k in range(1, 4):
        assert compute_iou(c, k) == tp[k] / (tp[k] + fp[k] + fn[k])
    prf = compute_prf(c)
    s_tp, s_fp, s_fn = tp[1:].sum(), fp[1:].sum(), fn[1:].sum()
    assert prf.recall == s_tp / (s_tp + s_fn)
    assert prf.precision == s_tp / (s_tp + s_fp)
    assert prf.accuracy == np.mean(pred == true)


# -- AP / mAP ----------------------------------------------------------------

def enumerated_ap(hits, n_gt):
    """Area under the interpolated PR curve from the prefix operating points."""
    points = []
    for k in range(1, len(hits) + 1):
        tp = sum(hits[:k])
        points.append((tp / n_gt, tp / k))
    area, prev_recall = 0.0, 0.0
    for recall, _ in sorted(set(points)):
        if recall <= prev_recall:
            continue
        best = max(p for r, p in points if r >= recall)
        area += (recall - prev_recall) * best
        prev_recall = recall
    return area


def test_perfect_detector():
    per_class, m = compute_map([box(1, 1, 5, 5, 0.9)], [box(1, 1, 5, 5)])
    assert per_class == {1: 1.0} and m == 1.0


def test_no_overlap_detector():
    per_class, m = compute_map([box(20, 20, 25, 25, 0.9)], [box(1, 1, 5, 5)])
    assert per_class[1] == 0.0 and m == 0.0


def test_no_detections():
    assert compute_map([], [box(1, 1, 5, 5)])[1] == 0.0


def test_hand_built_pr_curve():
    gts = [box(0, 0, 4, 4), box(10, 10, 14, 14), box(20, 20, 24, 24)]
    dets = [box(0, 0, 4, 4, 0.9), box(40, 40, 44, 44, 0.8),
            box(10, 10, 14, 14, 0.7), box(20, 20, 24, 24, 0.6)]
    ap = class_average_precision(dets, gts)
    # prefix points (R, P): (1/3, 1), (1/3, 1/2), (2/3, 2/3), (1, 3/4)
    assert ap == pytest.approx(1 / 3 + 0.75 * 2 / 3, abs=1e-12)
    assert ap == pytest.approx(enumerated_ap([1, 0, 1, 1], 3), abs=1e-9)


def test_duplicate_detection_is_false_positive():
    gts = [box(0, 0, 4, 4)]
    dets = [box(0, 0, 4, 4, 0.9), box(0, 0, 4, 4, 0.8)]
    assert class_average_precision(dets, gts) == 1.0
    assert class_average_precision(dets[::-1], gts) == 1.0


def test_matching_respects_image_id():
    gts = [box(0, 0, 4, 4, image="a")]
    assert class_average_precision([box(0, 0, 4, 4, 0.9, image="b")], gts) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=12), st.integers(0, 4))
def test_ap_matches_enumeration(hits, extra_gt):
    n_gt = max(1, sum(hits) + extra_gt)
    gts = [box(10 * i, 0, 10 * i + 4, 4) for i in range(n_gt)]
    dets, used = [], 0
    for rank, hit in enumerate(hits):
        conf = 1.0 - rank / 20
        if hit:
            dets.append(box(10 * used, 0, 10 * used + 4, 4, conf))
            used += 1
        else:
            dets.append(box(500, 500, 504, 504, conf))
    ap = class_average_precision(dets, gts)
    assert ap == pytest.approx(enumerated_ap([int(h) for h in hits], n_gt), abs=1e-9)


def test_ap_invariant_under_monotone_confidence_map():
    rng = np.random.default_rng(4)
    gts = [box(10 * i, 0, 10 * i + 4, 4) for i in range(6)]
    # slots 0..5 hit a ground-truth box, 6..7 miss
    slots = rng.integers(0, 8, size=10)
    dets = [box(10 * int(k), 0, 10 * int(k) + 4, 4, float(rng.random())) for k in slots]
    squashed = [DetectionBox(d.class_id, d.row_min, d.row_max, d.col_min, d.col_max,
                             confidence=d.confidence ** 3, image_id=d.image_id) for d in dets]
    assert class_average_precision(dets, gts) == class_average_precision(squashed, gts)


def test_map_is_mean_over_classes():
    gts = [box(0, 0, 4, 4, cls=1), box(0, 0, 4, 4, cls=2)]
    dets = [box(0, 0, 4, 4, 0.9, cls=1), box(30, 30, 34, 34, 0.9, cls=2)]
    per_class, m = compute_map(dets, gts)
    assert per_class == {1: 1.0, 2: 0.0}
    assert m == 0.5


def test_single_class_map_equals_ap():
    gts = [box(0, 0, 4, 4), box(10, 10, 14, 14)]
    dets = [box(0, 0, 4, 4, 0.3), box(10, 10, 13, 14, 0.8), box(50, 50, 54, 54, 0.5)]
    per_class, m = compute_map(dets, gts)
    assert m == per_class[1] == class_average_precision(dets, gts)


def test_reference_map_is_mean_of_per_class_values():
    assert mean_average_precision(list(REFERENCE_AP.values())) == pytest.approx(0.9422, abs=1e-4)


@pytest.mark.parametrize("thr", [0.0, 1.0, -0.5, 1.5])
def test_bad_iou_threshold(thr):
    with pytest.raises(MetricsError):
        compute_map([], [box(0, 0, 1, 1)], thr)


def test_average_precision_interpolation():
    assert average_precision(np.array([0.5, 0.5, 1.0]), np.array([1.0, 0.5, 2 / 3])) == \
        pytest.approx(0.5 + 0.5 * 2 / 3)


# -- report ------------------------------------------------------------------

def test_report_schema():
    names = ("background",) + tuple(REFERENCE_AP)
    c = counts_from([90, 5, 4, 0, 3], [1, 1, 0, 0, 1], [1, 0, 1, 0, 1], [10, 95, 96, 101, 96])
    gts = [box(0, 0, 4, 4, cls=1), box(0, 0, 4, 4, cls=2)]
    per_class, _ = compute_map([box(0, 0, 4, 4, 0.9, cls=1)], gts)
    report = MetricsReport.from_counts(c, per_class, names)
    d = report.as_dict()
    for key in ("miou", "recall", "precision", "f_score", "accuracy", "map"):
        assert key in d and 0.0 <= d[key] <= 1.0
    for name in REFERENCE_AP:
        assert f"ap_{name}" in d
    assert d["ap_shuriken"] is None and "ap_shuriken" in d["degenerate"]
    assert d["iou_shuriken"] is None and "iou_shuriken" in d["degenerate"]
    assert report.f_score == pytest.approx(
        2 * report.recall * report.precision / (report.recall + report.precision))
    text = report.to_text()
    assert "miou: " in text and "ap_knife: 1.000000" in text
    import json
    assert json.loads(report.to_json())["map"] == report.map
