"""Set-prediction matching math: box geometry, focal terms, pairwise
assignment costs, and the optimal one-to-one assignment itself.

Boxes are (cx, cy, w, h) arrays normalized to the image side unless a
function says otherwise; geometric quantities (IoU, GIoU) are computed in
corner form and are scale-free. The assignment solver is exact and
deterministic: ties resolve toward the lowest (pred_index, gt_index).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._kernels import solve_dense

FORBIDDEN_COST = 1e9
_EPS = 1e-8
_PT_CLAMP = 1e-12


@dataclass(frozen=True)
class BoxCxCyWH:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if self.w <= 0 or self.h <= 0:
            raise ValueError("box sides must be positive")

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )


@dataclass(frozen=True)
class CostWeights:
    """Weights of the three cost/loss components plus the focal shape
    parameters (alpha balances classes, gamma down-weights easy ones)."""

    lambda_giou: float = 2.0
    lambda_bbox: float = 2.0
    lambda_focal: float = 5.0
    alpha_focal: float = 0.25
    gamma_focal: float = 2.0

    def __post_init__(self) -> None:
        if min(self.lambda_giou, self.lambda_bbox, self.lambda_focal) < 0:
            raise ValueError("component weights must be >= 0")
        if not 0.0 <= self.alpha_focal <= 1.0 or self.gamma_focal < 0:
            raise ValueError("invalid focal parameters")


MATCHER_WEIGHTS = CostWeights(lambda_giou=2.0, lambda_bbox=2.0, lambda_focal=5.0)
LOSS_WEIGHTS = CostWeights(lambda_giou=2.0, lambda_bbox=1.0, lambda_focal=5.0, alpha_focal=0.25)


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    total_cost: float


def _corners(box) -> np.ndarray:
    if isinstance(box, BoxCxCyWH):
        return np.asarray(box.corners, dtype=np.float64)
    return np.asarray(box, dtype=np.float64)


def _cxcywh(box) -> np.ndarray:
    if isinstance(box, BoxCxCyWH):
        return np.array([box.cx, box.cy, box.w, box.h], dtype=np.float64)
    return np.asarray(box, dtype=np.float64)


def cxcywh_to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:4] / 2.0
    return np.concatenate([boxes[..., 0:2] - half, boxes[..., 0:2] + half], axis=-1)


def iou_giou_matrix(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise IoU and GIoU between corner-form box sets (N,4) and (M,4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    if np.any(area_a <= 0) or np.any(area_b <= 0):
        raise ValueError("degenerate zero-area box")
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.prod(np.clip(rb - lt, 0, None), axis=2)
    union = area_a[:, None] + area_b[None, :] - inter
    iou = inter / union
    lt_e = np.minimum(a[:, None, :2], b[None, :, :2])
    rb_e = np.maximum(a[:, None, 2:], b[None, :, 2:])
    enclose = np.prod(rb_e - lt_e, axis=2)
    giou = iou - (enclose - union) / enclose
    return iou, giou


def iou(a, b) -> float:
    """Intersection over union of two corner-form boxes."""
    return float(iou_giou_matrix(_corners(a)[None], _corners(b)[None])[0][0, 0])


def giou(a, b) -> float:
    """Generalized IoU of two corner-form boxes: IoU minus the empty
    fraction of the smallest enclosing box. Range [-1, 1]."""
    return float(iou_giou_matrix(_corners(a)[None], _corners(b)[None])[1][0, 0])


def l1_box(a, b) -> float:
    """Sum of absolute differences over (cx, cy, w, h)."""
    return float(np.abs(_cxcywh(a) - _cxcywh(b)).sum())


def focal_loss(p, target: int, alpha: float = 0.25, gamma: float = 2.0) -> float:
    """Focal-reweighted cross entropy -alpha*(1-p_t)^gamma*ln(p_t) for the
    probability vector ``p`` and true class ``target``. A zero p_t is
    clamped to 1e-12 (with a RuntimeWarning)."""
    p = np.asarray(p, dtype=np.float64)
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError("p must be a probability vector")
    if not 0 <= target < len(p):
        raise ValueError("target class out of range")
    pt = float(p[target])
    if pt < _PT_CLAMP:
        warnings.warn("focal_loss: p_t clamped to 1e-12", RuntimeWarning, stacklevel=2)
        pt = _PT_CLAMP
    return float(-alpha * (1.0 - pt) ** gamma * np.log(pt))


def _binary_focal_pos(p: np.ndarray, w: CostWeights) -> np.ndarray:
    return w.alpha_focal * (1.0 - p) ** w.gamma_focal * (-np.log(p + _EPS))


def _binary_focal_neg(p: np.ndarray, w: CostWeights) -> np.ndarray:
    return (1.0 - w.alpha_focal) * p**w.gamma_focal * (-np.log(1.0 - p + _EPS))


def _split_preds(preds) -> tuple[np.ndarray, np.ndarray]:
    boxes = np.array([_cxcywh(b) for b, _ in preds], dtype=np.float64).reshape(-1, 4)
    probs = np.array([np.asarray(p, dtype=np.float64) for _, p in preds]).reshape(len(preds), -1)
    return boxes, probs


def _split_gts(gts) -> tuple[np.ndarray, np.ndarray]:
    boxes = np.array([_cxcywh(b) for b, _ in gts], dtype=np.float64).reshape(-1, 4)
    classes = np.array([int(c) for _, c in gts], dtype=np.int64)
    return boxes, classes


def pairwise_cost(preds, gts, w: CostWeights = MATCHER_WEIGHTS) -> np.ndarray:
    """N x M matching cost: lambda_bbox*L1 + lambda_giou*(1-GIoU) +
    lambda_focal*(positive-minus-negative binary focal cost of the ground
    truth class). Empty sides give an empty matrix."""
    if len(preds) == 0 or len(gts) == 0:
        return np.zeros((len(preds), len(gts)), dtype=np.float64)
    pred_boxes, probs = _split_preds(preds)
    gt_boxes, gt_classes = _split_gts(gts)
    l1 = np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
    _, giou_m = iou_giou_matrix(cxcywh_to_corners(pred_boxes), cxcywh_to_corners(gt_boxes))
    p_gt = probs[:, gt_classes]
    cls_cost = _binary_focal_pos(p_gt, w) - _binary_focal_neg(p_gt, w)
    return w.lambda_bbox * l1 + w.lambda_giou * (1.0 - giou_m) + w.lambda_focal * cls_cost


def assign(cost: np.ndarray) -> Assignment:
    """Minimum-total-cost one-to-one assignment of size min(N, M).
    Encode forbidden pairs as FORBIDDEN_COST; entries must be finite."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    rows, cols, total = solve_dense(cost)
    return Assignment(pairs=tuple(zip(rows.tolist(), cols.tolist())), total_cost=total)


def set_loss(
    preds,
    gts,
    w: CostWeights = LOSS_WEIGHTS,
    matcher_weights: CostWeights = MATCHER_WEIGHTS,
) -> float:
    """Full set-prediction loss: match predictions to ground truth with the
    matcher weights, then sum lambda_bbox*L1 + lambda_giou*(1-GIoU) over
    matched pairs plus the per-class binary focal term over every query
    (matched queries target their ground-truth class, unmatched queries
    target background), all with the loss weights ``w``."""
    if len(preds) == 0:
        return 0.0
    pred_boxes, probs = _split_preds(preds)
    matched_gt = np.full(len(preds), -1, dtype=np.int64)
    box_term = 0.0
    if len(gts) > 0:
        gt_boxes, gt_classes = _split_gts(gts)
        matching = assign(pairwise_cost(preds, gts, matcher_weights))
        l1 = np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
        _, giou_m = iou_giou_matrix(cxcywh_to_corners(pred_boxes), cxcywh_to_corners(gt_boxes))
        for i, j in matching.pairs:
            matched_gt[i] = gt_classes[j]
            box_term += w.lambda_bbox * l1[i, j] + w.lambda_giou * (1.0 - giou_m[i, j])

    targets = np.zeros_like(probs)
    matched = matched_gt >= 0
    targets[np.nonzero(matched)[0], matched_gt[matched]] = 1.0
    focal = np.where(
        targets == 1.0, _binary_focal_pos(probs, w), _binary_focal_neg(probs, w)
    ).sum()
    return float(box_term + w.lambda_focal * focal)
