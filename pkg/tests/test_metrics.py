import numpy as np
import pytest

from bevinst.errors import NoGroundTruth
from bevinst.metrics import (
    DIST_THRESHOLDS,
    MatchResult,
    compute_ap,
    compute_nds,
    compute_tp_errors,
    evaluate,
    match_by_center_distance,
    precision_recall,
)


def boxes(xy, wlh=(1.0, 2.0, 1.5), yaw=0.0, v=(0.0, 0.0)):
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    out = np.zeros((len(xy), 10))
    out[:, :2] = xy
    out[:, 3:6] = wlh
    out[:, 6], out[:, 7] = np.sin(yaw), np.cos(yaw)
    out[:, 8:10] = v
    return out


def brute_greedy(pred_xy, scores, gt_xy, threshold):
    """Literal restatement of the greedy rule with Python loops."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], pred_xy[i][0], pred_xy[i][1]))
    taken, pairs = set(), []
    for i in order:
        best, best_d = None, None
        for j, g in enumerate(gt_xy):
            if j in taken:
                continue
            d = float(np.hypot(pred_xy[i][0] - g[0], pred_xy[i][1] - g[1]))
            if d < threshold and (best is None or d < best_d):
                best, best_d = j, d
        if best is not None:
            taken.add(best)
            pairs.append((i, best))
    return pairs


class TestMatching:
    def test_exact_hit(self):
        m = match_by_center_distance(boxes([[1, 1]]), [0.5], boxes([[1, 1]]), 0.5)
        assert m.pairs == [(0, 0, 0.0)] and not m.unmatched_gts and not m.unmatched_preds

    def test_too_far(self):
        m = match_by_center_distance(boxes([[3, 0]]), [0.5], boxes([[0, 0]]), 2.0)
        assert m.pairs == [] and m.unmatched_preds == [0] and m.unmatched_gts == [0]

    def test_higher_score_wins_contested_gt(self):
        m = match_by_center_distance(boxes([[0.1, 0], [0.05, 0]]), [0.4, 0.9], boxes([[0, 0]]), 1.0)
        assert [(p, g) for p, g, _ in m.pairs] == [(1, 0)]

    def test_tie_goes_to_lower_gt_index(self):
        m = match_by_center_distance(boxes([[0, 0]]), [0.5], boxes([[1, 0], [-1, 0]]), 2.0)
        assert m.pairs[0][1] == 0

    def test_against_brute_force(self, rng):
        for _ in range(100):
            n, g = rng.integers(0, 12, size=2)
            centers = rng.uniform(-5, 5, size=(3, 2))
            pred = centers[rng.integers(0, 3, n)] + rng.normal(0, 1, (n, 2))
            gt = centers[rng.integers(0, 3, g)] + rng.normal(0, 1, (g, 2))
            scores = np.round(rng.uniform(0, 1, n), 1)
            th = float(rng.choice(DIST_THRESHOLDS))
            m = match_by_center_distance(boxes(pred), scores, boxes(gt), th)
            assert [(p, q) for p, q, _ in m.pairs] == brute_greedy(pred.tolist(), scores.tolist(), gt.tolist(), th)

    def test_threshold_must_be_positive(self):
        with pytest.raises(ValueError):
            match_by_center_distance(boxes([[0, 0]]), [1.0], boxes([[0, 0]]), 0.0)


class TestAP:
    def test_perfect(self, rng):
        gt = boxes(rng.uniform(-20, 20, (6, 2)))
        assert compute_ap(gt, rng.uniform(0.5, 1, 6), gt, 0.5) == pytest.approx(1.0, abs=1e-12)

    def test_no_predictions(self):
        assert compute_ap(np.zeros((0, 10)), [], boxes([[0, 0]]), 1.0) == 0.0

    def test_no_ground_truth(self):
        with pytest.raises(NoGroundTruth):
            compute_ap(boxes([[0, 0]]), [0.5], np.zeros((0, 10)), 1.0)

    def test_staircase_two_gts(self):
        # TP 0.9, FP 0.8, TP 0.7 -> precision (1, 1/2, 2/3) at recall (1/2, 1/2, 1).
        # Recall bins 0.11..0.49 read precision 1. The bin at exactly 0.50 hits the duplicated recall
        # value and linear interpolation returns the later precision 1/2 (as the reference devkit does).
        # Bins 0.51..1.00 interpolate 1/2 -> 2/3.
        # Sum of (p - 0.1) = 39 * 0.9 + 0.4 + 50 * 0.4 + (0.01 + ... + 0.50) / 3 = 59.75, over 90 bins, / 0.9.
        gt = boxes([[0, 0], [10, 0]])
        pred = boxes([[0, 0], [30, 30], [10, 0]])
        prec, rec = precision_recall(pred, [0.9, 0.8, 0.7], gt, 1.0)
        np.testing.assert_allclose(prec, [1.0, 0.5, 2 / 3])
        np.testing.assert_allclose(rec, [0.5, 0.5, 1.0])
        assert compute_ap(pred, [0.9, 0.8, 0.7], gt, 1.0) == pytest.approx(59.75 / 81, abs=1e-12)

    def test_staircase_three_gts(self):
        # TP 0.9, FP 0.8, TP 0.7, FP 0.6 with 3 GTs: recall tops out at 2/3.
        # Bins 0.11..0.33 -> 0.9 each (23 bins); 0.34..0.66 -> 0.4 + (r - 1/3)/2; beyond 2/3 -> 0.
        # 23 * 0.9 + 33 * 0.4 + 5.5 / 2 = 36.65, over 90 bins, / 0.9.
        gt = boxes([[0, 0], [10, 0], [20, 0]])
        pred = boxes([[0, 0], [-30, 5], [10, 0.2], [40, 40]])
        assert compute_ap(pred, [0.9, 0.8, 0.7, 0.6], gt, 1.0) == pytest.approx(36.65 / 81, abs=1e-12)

    def test_monotone_in_threshold_50_sets(self, rng):
        for _ in range(50):
            g = int(rng.integers(1, 15))
            gt = rng.uniform(-30, 30, (g, 2))
            n = int(rng.integers(0, 25))
            pred = np.concatenate([gt[rng.integers(0, g, n // 2)] + rng.normal(0, 1.5, (n // 2, 2)),
                                   rng.uniform(-30, 30, (n - n // 2, 2))])
            scores = rng.uniform(0, 1, n)
            aps = [compute_ap(boxes(pred), scores, boxes(gt), th) for th in DIST_THRESHOLDS]
            assert all(a <= b + 1e-12 for a, b in zip(aps, aps[1:])), aps

    def test_permutation_invariant(self, rng):
        gt = boxes(rng.uniform(-10, 10, (5, 2)))
        pred = boxes(rng.uniform(-10, 10, (12, 2)))
        scores = np.round(rng.uniform(0, 1, 12), 1)
        perm = rng.permutation(12)
        for th in DIST_THRESHOLDS:
            assert compute_ap(pred, scores, gt, th) == compute_ap(pred[perm], scores[perm], gt, th)

    def test_lower_scored_duplicate_never_helps(self, rng):
        for _ in range(30):
            gt = boxes(rng.uniform(-10, 10, (4, 2)))
            pred = boxes(gt[:, :2] + rng.normal(0, 0.7, (4, 2)))
            scores = rng.uniform(0.3, 1, 4)
            dup = int(rng.integers(0, 4))
            more = np.concatenate([pred, pred[dup : dup + 1]])
            for th in DIST_THRESHOLDS:
                base = compute_ap(pred, scores, gt, th)
                assert compute_ap(more, np.append(scores, scores[dup] * 0.5), gt, th) <= base + 1e-12


class TestTPErrors:
    def test_perfect(self):
        gt = boxes([[1, 2], [5, 5]], yaw=0.3, v=(1.0, -1.0))
        m = match_by_center_distance(gt, [0.9, 0.8], gt, 2.0)
        assert compute_tp_errors(m, gt, gt) == {"mate": 0.0, "mase": 0.0, "maoe": 0.0, "mave": 0.0}

    def test_half_scale(self):
        gt = boxes([[0, 0]], wlh=(2.0, 4.0, 1.0))
        pred = boxes([[0, 0]], wlh=(1.0, 2.0, 0.5))
        m = match_by_center_distance(pred, [0.9], gt, 2.0)
        assert compute_tp_errors(m, pred, gt)["mase"] == pytest.approx(0.875)

    def test_quarter_turn(self):
        gt, pred = boxes([[0, 0]]), boxes([[0, 0]], yaw=np.pi / 2)
        m = match_by_center_distance(pred, [0.9], gt, 2.0)
        assert compute_tp_errors(m, pred, gt)["maoe"] == pytest.approx(np.pi / 2)

    def test_orientation_wraps(self):
        gt, pred = boxes([[0, 0]], yaw=-3.0), boxes([[0, 0]], yaw=3.0)
        m = match_by_center_distance(pred, [0.9], gt, 2.0)
        assert compute_tp_errors(m, pred, gt)["maoe"] == pytest.approx(2 * np.pi - 6.0)

    def test_translation_and_velocity(self):
        gt = boxes([[0, 0]], v=(1.0, 1.0))
        pred = boxes([[0.3, 0.4]], v=(4.0, 5.0))
        m = match_by_center_distance(pred, [0.9], gt, 2.0)
        errs = compute_tp_errors(m, pred, gt)
        assert errs["mate"] == pytest.approx(0.5) and errs["mave"] == pytest.approx(5.0)

    def test_no_matches_worst_case(self):
        assert compute_tp_errors(MatchResult(), np.zeros((0, 10)), boxes([[0, 0]])) == {
            "mate": 1.0, "mase": 1.0, "maoe": np.pi, "mave": 1.0}


class TestNDS:
    def test_perfect(self):
        assert compute_nds(1.0, {"mate": 0.0, "mase": 0.0, "maoe": 0.0, "mave": 0.0}) == 1.0

    def test_zero(self):
        assert compute_nds(0.0, {"mate": 1.0, "mase": 1.0, "maoe": np.pi, "mave": 1.0}) == 0.0

    def test_errors_capped(self):
        assert compute_nds(0.0, {"mate": 7.0, "mase": 2.0, "maoe": 9.0, "mave": 30.0}) == 0.0

    def test_half_map(self):
        assert compute_nds(0.5, {"mate": 1.0, "mase": 1.0, "maoe": np.pi, "mave": 1.0}) == pytest.approx(2.5 / 9)

    def test_orientation_normalized_by_pi(self):
        assert compute_nds(0.0, {"mate": 1.0, "mase": 1.0, "maoe": np.pi / 2, "mave": 1.0}) == pytest.approx(0.5 / 9)


class TestEvaluate:
    def test_ground_truth_as_detections(self, rng):
        gt = boxes(rng.uniform(-20, 20, (8, 2)), yaw=0.4, v=(0.5, 0.0))
        rep = evaluate(gt, np.linspace(1, 0.5, 8), gt)
        assert rep.map == pytest.approx(1.0) and rep.nds == pytest.approx(1.0)
        assert set(rep.ap) == {"0.5", "1.0", "2.0", "4.0"}

    def test_empty_detections(self):
        rep = evaluate(np.zeros((0, 10)), [], boxes([[0, 0]]))
        assert rep.map == 0.0 and rep.nds == 0.0

    def test_per_class_average(self):
        gt = boxes([[0, 0], [10, 0]])
        rep = evaluate(boxes([[0, 0]]), [0.9], gt, pred_classes=[0], gt_classes=[0, 1])
        assert rep.map == pytest.approx(0.5)

    def test_report_fields(self):
        d = evaluate(boxes([[0, 0]]), [0.9], boxes([[0, 0]])).to_dict()
        assert set(d) == {"map", "ap", "mate", "mase", "maoe", "mave", "nds"}
