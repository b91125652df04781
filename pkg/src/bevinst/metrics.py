"""Center-distance detection metrics: AP over distance thresholds, true-positive
errors and a detection score.

AP follows the nuScenes recipe: greedy matching by descending score, precision
interpolated on 101 recall points, bins with recall <= 0.1 dropped,
precision shifted by 0.1 and clipped at zero, the mean rescaled by 1/0.9. This
equals the area above precision 0.1 and recall 0.1 divided by 0.81.

The detection score has no attribute term, so the divisor is 9:
``NDS = (5 * mAP + sum_e (1 - min(1, e / norm_e))) / 9`` over translation
(norm 1 m), scale (1), orientation (pi rad) and velocity (1 m/s) errors.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NoGroundTruth

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
N_RECALL = 101
TP_NORMALIZERS = {"mate": 1.0, "mase": 1.0, "maoe": np.pi, "mave": 1.0}


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (pred, gt, distance)
    unmatched_preds: list[int] = field(default_factory=list)
    unmatched_gts: list[int] = field(default_factory=list)


@dataclass
class MetricsReport:
    map: float
    ap: dict[str, float]
    mate: float
    mase: float
    maoe: float
    mave: float
    nds: float

    def to_dict(self) -> dict:
        return asdict(self)


def _order(pred_boxes: np.ndarray, pred_scores: np.ndarray) -> np.ndarray:
    return np.lexsort((pred_boxes[:, 1], pred_boxes[:, 0], -pred_scores))


def match_by_center_distance(pred_boxes, pred_scores, gt_boxes, threshold: float) -> MatchResult:
    """Greedy one-to-one matching by descending score.

    Each prediction takes the nearest still-unmatched ground truth whose BEV
    center distance is below ``threshold``; ties go to the lower GT index.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    preds = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 10)
    scores = np.asarray(pred_scores, dtype=np.float64).reshape(-1)
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 10)
    taken = np.zeros(len(gts), dtype=bool)
    result = MatchResult()
    for i in _order(preds, scores):
        if len(gts):
            d = np.hypot(gts[:, 0] - preds[i, 0], gts[:, 1] - preds[i, 1])
            d[taken] = np.inf
            j = int(np.argmin(d))
            if d[j] < threshold:
                taken[j] = True
                result.pairs.append((int(i), j, float(d[j])))
                continue
        result.unmatched_preds.append(int(i))
    result.unmatched_gts = [int(j) for j in np.flatnonzero(~taken)]
    return result


def precision_recall(pred_boxes, pred_scores, gt_boxes, threshold: float):
    """Raw cumulative ``(precision, recall)`` arrays in descending-score order."""
    preds = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 10)
    scores = np.asarray(pred_scores, dtype=np.float64).reshape(-1)
    n_gt = len(np.asarray(gt_boxes).reshape(-1, 10))
    match = match_by_center_distance(preds, scores, gt_boxes, threshold)
    is_tp = np.zeros(len(preds), dtype=bool)
    for i, _, _ in match.pairs:
        is_tp[i] = True
    order = _order(preds, scores)
    tp = np.cumsum(is_tp[order]).astype(np.float64)
    fp = np.cumsum(~is_tp[order]).astype(np.float64)
    return tp / (tp + fp), tp / n_gt


def compute_ap(pred_boxes, pred_scores, gt_boxes, threshold: float) -> float:
    n_gt = len(np.asarray(gt_boxes).reshape(-1, 10))
    if n_gt == 0:
        raise NoGroundTruth("AP is undefined without ground truth")
    if len(np.asarray(pred_scores).reshape(-1)) == 0:
        return 0.0
    prec, rec = precision_recall(pred_boxes, pred_scores, gt_boxes, threshold)
    rec_interp = np.linspace(0.0, 1.0, N_RECALL)
    prec_interp = np.interp(rec_interp, rec, prec, right=0.0)
    tail = prec_interp[int(round(100 * MIN_RECALL)) + 1 :] - MIN_PRECISION
    tail[tail < 0] = 0.0
    return float(np.mean(tail)) / (1.0 - MIN_PRECISION)


def _wrap_angle(a):
    return np.abs(np.arctan2(np.sin(a), np.cos(a)))


def compute_tp_errors(matches: MatchResult, pred_boxes, gt_boxes) -> dict[str, float]:
    """Mean translation, scale (1 - aligned IoU), orientation and velocity errors.

    With no matches every error takes its worst case: the normalizer itself
    (1 m, 1, pi rad, 1 m/s), so each contributes zero to the detection score.
    """
    if not matches.pairs:
        return dict(TP_NORMALIZERS)
    preds = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 10)
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 10)
    pi = np.array([p for p, _, _ in matches.pairs])
    gi = np.array([g for _, g, _ in matches.pairs])
    p, g = preds[pi], gts[gi]
    trans = np.hypot(p[:, 0] - g[:, 0], p[:, 1] - g[:, 1])
    inter = np.prod(np.minimum(p[:, 3:6], g[:, 3:6]), axis=1)
    union = np.prod(p[:, 3:6], axis=1) + np.prod(g[:, 3:6], axis=1) - inter
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    yaw_p = np.arctan2(p[:, 6], p[:, 7])
    yaw_g = np.arctan2(g[:, 6], g[:, 7])
    orient = _wrap_angle(yaw_p - yaw_g)
    vel = np.hypot(p[:, 8] - g[:, 8], p[:, 9] - g[:, 9])
    return {
        "mate": float(trans.mean()),
        "mase": float(np.mean(1.0 - iou)),
        "maoe": float(orient.mean()),
        "mave": float(vel.mean()),
    }


def compute_nds(map_value: float, tp_errors: dict[str, float]) -> float:
    total = 5.0 * map_value
    for name, norm in TP_NORMALIZERS.items():
        total += 1.0 - min(1.0, tp_errors[name] / norm)
    return total / 9.0


def evaluate(
    pred_boxes,
    pred_scores,
    gt_boxes,
    pred_classes=None,
    gt_classes=None,
    thresholds: Sequence[float] = DIST_THRESHOLDS,
    tp_threshold: float = TP_THRESHOLD,
) -> MetricsReport:
    """Full report. Classes are evaluated separately and averaged when class ids are given."""
    preds = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 10)
    scores = np.asarray(pred_scores, dtype=np.float64).reshape(-1)
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 10)
    if pred_classes is None or gt_classes is None:
        pred_classes = np.zeros(len(preds), dtype=np.int64)
        gt_classes = np.zeros(len(gts), dtype=np.int64)
    pred_classes = np.asarray(pred_classes).reshape(-1)
    gt_classes = np.asarray(gt_classes).reshape(-1)
    classes = np.unique(gt_classes)
    if classes.size == 0:
        raise NoGroundTruth("no ground-truth boxes to evaluate against")
    ap_by_th = {str(th): [] for th in thresholds}
    errs = {k: [] for k in TP_NORMALIZERS}
    for cls in classes:
        pm, gm = pred_classes == cls, gt_classes == cls
        for th in thresholds:
            ap_by_th[str(th)].append(compute_ap(preds[pm], scores[pm], gts[gm], th))
        match = match_by_center_distance(preds[pm], scores[pm], gts[gm], tp_threshold)
        for k, v in compute_tp_errors(match, preds[pm], gts[gm]).items():
            errs[k].append(v)
    ap = {th: float(np.mean(v)) for th, v in ap_by_th.items()}
    map_value = float(np.mean(list(ap.values())))
    tp = {k: float(np.mean(v)) for k, v in errs.items()}
    return MetricsReport(map=map_value, ap=ap, nds=compute_nds(map_value, tp), **tp)
