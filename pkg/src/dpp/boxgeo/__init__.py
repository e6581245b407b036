"""Bounding-box geometry, bipartite set matching, and detection metrics.

The pairwise IoU/GIoU matrices and the assignment solver are hot kernels:
they run once per head stage inside every training step. A compiled Cython
backend is used when available; set the environment variable
``DPP_PURE_GEOM=1`` (or build without the extension) to select the pure
numpy fallback. ``BACKEND`` names the active choice.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import _puregeom

if os.environ.get("DPP_PURE_GEOM"):
    _impl = _puregeom
    BACKEND = "pure"
else:
    try:
        from . import _fastgeom as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _puregeom
        BACKEND = "pure"

COCO_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass
class Box:
    """Axis-aligned box in normalized image coordinates.

    ``class_id`` is the ground-truth label for truths or the argmax label
    for predictions; ``score`` is the prediction confidence in [0, 1].
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = 0
    score: float = 1.0

    def validate(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(np.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box: {coords}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])


@dataclass(frozen=True)
class MatchResult:
    """Partial bijection between prediction and truth indices."""

    pairs: tuple  # ((prediction index, truth index), ...)
    unmatched_predictions: tuple
    unmatched_truths: tuple
    total_cost: float


def _as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        arr = np.ascontiguousarray(boxes, dtype=np.float64)
    else:
        arr = np.ascontiguousarray([b.as_array() for b in boxes], dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected (n,4) boxes, got shape {arr.shape}")
    return arr


def iou_matrix(a, b) -> np.ndarray:
    a, b = _as_box_array(a), _as_box_array(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    return _impl.iou_matrix(a, b)


def giou_matrix(a, b) -> np.ndarray:
    a, b = _as_box_array(a), _as_box_array(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    return _impl.giou_matrix(a, b)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union has zero area."""
    return float(iou_matrix([a], [b])[0, 0])


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: iou - (hull - union) / hull, in [-1, 1]."""
    return float(giou_matrix([a], [b])[0, 0])


def linear_sum_assignment(cost: np.ndarray):
    """(row_ind, col_ind) of the min-cost assignment of min(m,n) pairs."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    if cost.shape[0] <= cost.shape[1]:
        return _impl.lsa_core(cost)
    col_ind, row_ind = _impl.lsa_core(np.ascontiguousarray(cost.T))
    order = np.argsort(row_ind)
    return row_ind[order], col_ind[order]


def hungarian(cost: np.ndarray) -> MatchResult:
    """Minimum-total-cost matching of an m-predictions x n-truths matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    row_ind, col_ind = linear_sum_assignment(cost)
    pairs = tuple((int(r), int(c)) for r, c in zip(row_ind, col_ind))
    total = float(cost[row_ind, col_ind].sum()) if len(pairs) else 0.0
    matched_r = set(int(r) for r in row_ind)
    matched_c = set(int(c) for c in col_ind)
    return MatchResult(
        pairs=pairs,
        unmatched_predictions=tuple(i for i in range(cost.shape[0])
                                    if i not in matched_r),
        unmatched_truths=tuple(j for j in range(cost.shape[1])
                               if j not in matched_c),
        total_cost=total,
    )


@dataclass(frozen=True)
class APResult:
    per_threshold: dict
    mean: float


def average_precision_pooled(pred_boxes, pred_classes, pred_scores,
                             pred_image_ids, true_boxes, true_classes,
                             true_image_ids,
                             iou_thresholds=COCO_THRESHOLDS) -> APResult:
    """Average precision pooled over classes and images.

    Predictions are ranked by descending score (ties broken by box content,
    so any score-preserving reordering of the input gives identical output)
    and greedily matched to same-image, same-class truths at each IoU
    threshold, each truth used at most once, highest-IoU candidate first.
    AP is the 101-point interpolated area under the precision-recall curve,
    averaged over the thresholds.
    """
    pred_boxes = _as_box_array(pred_boxes)
    true_boxes = _as_box_array(true_boxes)
    pred_classes = np.asarray(pred_classes, dtype=np.intp)
    pred_scores = np.asarray(pred_scores, dtype=np.float64)
    pred_image_ids = np.asarray(pred_image_ids, dtype=np.intp)
    true_classes = np.asarray(true_classes, dtype=np.intp)
    true_image_ids = np.asarray(true_image_ids, dtype=np.intp)
    if pred_scores.size and (pred_scores.min() < 0 or pred_scores.max() > 1):
        raise ValueError("prediction scores must lie in [0, 1]")

    n_pred = pred_boxes.shape[0]
    n_true = true_boxes.shape[0]
    thresholds = tuple(iou_thresholds)
    if n_pred == 0 or n_true == 0:
        return APResult({t: 0.0 for t in thresholds}, 0.0)

    # content-based tie-break keeps the metric invariant to input order
    order = np.lexsort((
        pred_classes,
        pred_boxes[:, 3], pred_boxes[:, 2], pred_boxes[:, 1], pred_boxes[:, 0],
        pred_image_ids,
        -pred_scores,
    ))

    # candidate truths (same image, same class) and their IoUs per prediction
    truth_index: dict = {}
    for t in range(n_true):
        truth_index.setdefault(
            (int(true_image_ids[t]), int(true_classes[t])), []).append(t)
    truth_index = {k: np.asarray(v, dtype=np.intp) for k, v in truth_index.items()}
    cand: list = [None] * n_pred
    cand_iou: list = [None] * n_pred
    for p in range(n_pred):
        tix = truth_index.get((int(pred_image_ids[p]), int(pred_classes[p])))
        if tix is not None:
            cand[p] = tix
            cand_iou[p] = iou_matrix(pred_boxes[p:p + 1], true_boxes[tix])[0]

    recall_grid = np.linspace(0.0, 1.0, 101)
    per_threshold = {}
    for thr in thresholds:
        used = np.zeros(n_true, dtype=bool)
        tp = np.zeros(n_pred)
        for rank, p in enumerate(order):
            tix = cand[p]
            if tix is None:
                continue
            ious = np.where(used[tix], -1.0, cand_iou[p])
            best = int(np.argmax(ious))
            if ious[best] >= thr:
                used[tix[best]] = True
                tp[rank] = 1.0
        cum_tp = np.cumsum(tp)
        recall = cum_tp / n_true
        precision = cum_tp / np.arange(1, n_pred + 1)
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        idx = np.searchsorted(recall, recall_grid, side="left")
        interp = np.where(idx < n_pred, envelope[np.minimum(idx, n_pred - 1)], 0.0)
        per_threshold[thr] = float(interp.mean())

    return APResult(per_threshold, float(np.mean(list(per_threshold.values()))))


def average_precision(predictions, truths,
                      iou_thresholds=COCO_THRESHOLDS) -> APResult:
    """Single-image AP over Box lists (scored predictions vs ground truth)."""
    zeros_p = np.zeros(len(predictions), dtype=np.intp)
    zeros_t = np.zeros(len(truths), dtype=np.intp)
    return average_precision_pooled(
        predictions,
        [b.class_id for b in predictions],
        [b.score for b in predictions],
        zeros_p,
        truths,
        [b.class_id for b in truths],
        zeros_t,
        iou_thresholds=iou_thresholds,
    )
