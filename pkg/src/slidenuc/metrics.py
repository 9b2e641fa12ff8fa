"""Centroid-based detection and classification scoring.

Ground-truth and predicted centroids are matched one-to-one within a fixed
physical radius (stored in micrometers and converted by the pixel spacing,
so the same criterion holds at any magnification). Matched pairs drive the
detection precision/recall/F1; their label agreement drives the per-class
scores:

    F_c = 2(TP_c+TN_c) / (2(TP_c+TN_c) + 2FP_c + 2FN_c + FP_det + FN_det)
    P_c = (TP_c+TN_c) / (TP_c+TN_c + 2FP_c + FP_det)
    R_c = (TP_c+TN_c) / (TP_c+TN_c + 2FN_c + FN_det)

with TN_c counting matched pairs where neither side is class c. Division
by zero yields 0 and is recorded in the report flags rather than hidden.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .annotations import DEFAULT_CLASS_NAMES, AnnotationSet
from .detector import filter_by_confidence
from .matchloss import assign
from .tiler import Detection

DEFAULT_RADIUS_UM = 3.0  # 12 px at 0.25 um/px, 6 px at 0.50 um/px


@dataclass
class MatchResult:
    """Outcome of the bipartite centroid matching; pairs are
    (gt_index, pred_index, distance_px) with distance <= radius."""

    pairs: list[tuple[int, int, float]]
    unmatched_gt: list[int]
    unmatched_pred: list[int]
    radius_px: float

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)


def _components(n_gt: int, adjacency: list[list[int]]) -> list[tuple[list[int], list[int]]]:
    """Connected components of the bipartite candidate graph."""
    seen_gt = np.zeros(n_gt, dtype=bool)
    pred_owner: dict[int, int] = {}
    pred_to_gt: dict[int, list[int]] = {}
    for gi, preds in enumerate(adjacency):
        for pj in preds:
            pred_to_gt.setdefault(pj, []).append(gi)
    comps = []
    for start in range(n_gt):
        if seen_gt[start] or not adjacency[start]:
            continue
        gts, preds, stack = [], set(), [start]
        seen_gt[start] = True
        while stack:
            gi = stack.pop()
            gts.append(gi)
            for pj in adjacency[gi]:
                if pj not in preds:
                    preds.add(pj)
                    for gk in pred_to_gt[pj]:
                        if not seen_gt[gk]:
                            seen_gt[gk] = True
                            stack.append(gk)
        comps.append((sorted(gts), sorted(preds)))
    return comps


def match_centroids(
    gt_points,
    pred_points,
    radius_um: float = DEFAULT_RADIUS_UM,
    mpp: float = 0.25,
    strategy: str = "optimal",
) -> MatchResult:
    """Match predicted to ground-truth centroids within radius_um/mpp
    pixels. ``optimal`` returns a maximum-cardinality matching of minimum
    total distance; ``greedy`` takes nearest pairs first (for sensitivity
    checks)."""
    if radius_um <= 0:
        raise ValueError("radius_um must be positive")
    if mpp <= 0:
        raise ValueError("mpp must be positive")
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 2)
    radius_px = radius_um / mpp
    if len(gt) == 0 or len(pred) == 0:
        return MatchResult([], list(range(len(gt))), list(range(len(pred))), radius_px)

    adjacency = cKDTree(gt).query_ball_tree(cKDTree(pred), r=radius_px)
    pairs: list[tuple[int, int, float]] = []

    if strategy == "greedy":
        cand = []
        for gi, preds in enumerate(adjacency):
            for pj in preds:
                cand.append((float(np.linalg.norm(gt[gi] - pred[pj])), gi, pj))
        cand.sort()
        used_gt: set[int] = set()
        used_pred: set[int] = set()
        for dist, gi, pj in cand:
            if gi in used_gt or pj in used_pred:
                continue
            used_gt.add(gi)
            used_pred.add(pj)
            pairs.append((gi, pj, dist))
    elif strategy == "optimal":
        for gts, preds in _components(len(gt), adjacency):
            d = np.linalg.norm(gt[gts][:, None, :] - pred[preds][None, :, :], axis=2)
            sentinel = max(1e9, 1e3 * radius_px * (min(len(gts), len(preds)) + 1))
            cost = np.where(d <= radius_px, d, sentinel)
            for i, j in assign(cost).pairs:
                if d[i, j] <= radius_px:
                    pairs.append((gts[i], preds[j], float(d[i, j])))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    pairs.sort()
    matched_gt = {gi for gi, _, _ in pairs}
    matched_pred = {pj for _, pj, _ in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_gt=[i for i in range(len(gt)) if i not in matched_gt],
        unmatched_pred=[j for j in range(len(pred)) if j not in matched_pred],
        radius_px=radius_px,
    )


def _safe_div(num: float, den: float, what: str, flags: list[str] | None) -> float:
    if den == 0:
        if flags is not None:
            flags.append(f"{what}: 0/0 -> 0")
        return 0.0
    return num / den


def detection_metrics(m: MatchResult, flags: list[str] | None = None) -> tuple[float, float, float]:
    """Precision, recall, and their harmonic mean from the match outcome."""
    p = _safe_div(m.tp, m.tp + m.fp, "P_det", flags)
    r = _safe_div(m.tp, m.tp + m.fn, "R_det", flags)
    f = _safe_div(2 * p * r, p + r, "F_det", flags)
    return p, r, f


@dataclass
class ClassCounts:
    """Per-class contingency over matched pairs only."""

    class_ids: tuple[int, ...]
    tp: np.ndarray
    tn: np.ndarray
    fp: np.ndarray
    fn: np.ndarray


def classification_counts(
    m: MatchResult,
    gt_labels,
    pred_labels,
    class_ids: Sequence[int] | None = None,
) -> ClassCounts:
    """Count, for each class c over matched pairs: both sides c (TP_c),
    prediction c only (FP_c), ground truth c only (FN_c), neither (TN_c)."""
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    pred_labels = np.asarray(pred_labels, dtype=np.int64)
    if class_ids is None:
        present = np.concatenate([gt_labels, pred_labels]) if len(gt_labels) + len(pred_labels) else np.array([0])
        class_ids = tuple(range(int(present.max()) + 1))
    class_ids = tuple(int(c) for c in class_ids)
    g = np.array([gt_labels[gi] for gi, _, _ in m.pairs], dtype=np.int64)
    p = np.array([pred_labels[pj] for _, pj, _ in m.pairs], dtype=np.int64)
    tp = np.array([int(np.sum((g == c) & (p == c))) for c in class_ids])
    fp = np.array([int(np.sum((g != c) & (p == c))) for c in class_ids])
    fn = np.array([int(np.sum((g == c) & (p != c))) for c in class_ids])
    tn = np.array([int(np.sum((g != c) & (p != c))) for c in class_ids])
    return ClassCounts(class_ids=class_ids, tp=tp, tn=tn, fp=fp, fn=fn)


def classification_metrics(
    counts: ClassCounts,
    m: MatchResult,
    gt_labels=None,
    pred_labels=None,
    per_class_detection_counts: bool = False,
    flags: list[str] | None = None,
) -> dict[int, tuple[float, float, float]]:
    """Per-class precision/recall/F. By default the detection-level FP/FN
    terms are the global counts; per_class_detection_counts=True restricts
    them to unmatched entries of the class itself (comparison mode)."""
    out: dict[int, tuple[float, float, float]] = {}
    for k, c in enumerate(counts.class_ids):
        if per_class_detection_counts:
            if gt_labels is None or pred_labels is None:
                raise ValueError("per-class detection counts require the label arrays")
            gt_labels_a = np.asarray(gt_labels, dtype=np.int64)
            pred_labels_a = np.asarray(pred_labels, dtype=np.int64)
            fp_det = int(np.sum(pred_labels_a[m.unmatched_pred] == c)) if m.unmatched_pred else 0
            fn_det = int(np.sum(gt_labels_a[m.unmatched_gt] == c)) if m.unmatched_gt else 0
        else:
            fp_det = m.fp
            fn_det = m.fn
        num = counts.tp[k] + counts.tn[k]
        p = _safe_div(num, num + 2 * counts.fp[k] + fp_det, f"P_c[{c}]", flags)
        r = _safe_div(num, num + 2 * counts.fn[k] + fn_det, f"R_c[{c}]", flags)
        f = _safe_div(
            2 * num,
            2 * num + 2 * counts.fp[k] + 2 * counts.fn[k] + fp_det + fn_det,
            f"F_c[{c}]",
            flags,
        )
        out[c] = (p, r, f)
    return out


def macro_average(values: Sequence[float]) -> float:
    """Unweighted mean over the configured classes (zeros included)."""
    if len(values) == 0:
        raise ValueError("macro average of an empty list")
    return float(np.mean(values))


@dataclass
class MetricsReport:
    p_det: float
    r_det: float
    f_det: float
    per_class: dict[str, tuple[float, float, float]]
    macro_f: float
    tp_det: int
    fp_det: int
    fn_det: int
    threshold: float | None = None
    flags: tuple[str, ...] = ()
    per_tissue: dict[str, "MetricsReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "detection": {
                "precision": self.p_det,
                "recall": self.r_det,
                "f1": self.f_det,
                "tp": self.tp_det,
                "fp": self.fp_det,
                "fn": self.fn_det,
            },
            "classes": {
                name: {"precision": p, "recall": r, "f1": f}
                for name, (p, r, f) in self.per_class.items()
            },
            "macro_f1": self.macro_f,
            "threshold": self.threshold,
            "flags": list(self.flags),
        }
        if self.per_tissue:
            d["tissues"] = {t: r.to_dict() for t, r in self.per_tissue.items()}
        return d


def _det_arrays(detections: Sequence[Detection]) -> tuple[np.ndarray, np.ndarray]:
    if not detections:
        return np.empty((0, 2)), np.empty(0, dtype=np.int64)
    pts = np.array([(d.cx, d.cy) for d in detections], dtype=np.float64)
    labels = np.array([d.class_id for d in detections], dtype=np.int64)
    return pts, labels


def evaluate(
    annotations: AnnotationSet,
    detections: Sequence[Detection],
    radius_um: float = DEFAULT_RADIUS_UM,
    class_names: Sequence[str] = DEFAULT_CLASS_NAMES,
    threshold: float | None = None,
    strategy: str = "optimal",
    per_class_detection_counts: bool = False,
) -> MetricsReport:
    """Score detections against annotations: match centroids, then compute
    detection and per-class metrics and the macro-average F1."""
    if threshold is not None:
        detections = filter_by_confidence(detections, threshold)
    pred_pts, pred_labels = _det_arrays(detections)
    flags: list[str] = []
    m = match_centroids(annotations.points, pred_pts, radius_um, annotations.mpp, strategy)
    p, r, f = detection_metrics(m, flags)
    class_ids = tuple(range(len(class_names)))
    counts = classification_counts(m, annotations.class_id, pred_labels, class_ids)
    per_class = classification_metrics(
        counts, m, annotations.class_id, pred_labels, per_class_detection_counts, flags
    )
    named = {class_names[c]: per_class[c] for c in class_ids}
    macro = macro_average([named[n][2] for n in named])
    return MetricsReport(
        p_det=p,
        r_det=r,
        f_det=f,
        per_class=named,
        macro_f=macro,
        tp_det=m.tp,
        fp_det=m.fp,
        fn_det=m.fn,
        threshold=threshold,
        flags=tuple(flags),
    )


def per_tissue_report(
    annotations: AnnotationSet,
    detections: Sequence[Detection],
    radius_um: float = DEFAULT_RADIUS_UM,
    class_names: Sequence[str] = DEFAULT_CLASS_NAMES,
    pred_tissues: Sequence[str] | None = None,
    strategy: str = "optimal",
) -> dict[str, MetricsReport]:
    """Independent metrics per tissue group. Annotations are grouped by
    their tags (missing tags become "untagged"); predictions use explicit
    ``pred_tissues`` when given, otherwise each inherits the tissue of its
    nearest annotation."""
    gt_tags = [t if t is not None else "untagged" for t in annotations.tissue]
    pred_pts, _ = _det_arrays(detections)
    if pred_tissues is None:
        if len(annotations) and len(pred_pts):
            _, nearest = cKDTree(annotations.points).query(pred_pts)
            pred_tissues = [gt_tags[int(i)] for i in nearest]
        else:
            pred_tissues = ["untagged"] * len(pred_pts)
    elif len(pred_tissues) != len(detections):
        raise ValueError("pred_tissues must parallel detections")

    tissues = sorted(set(gt_tags) | set(pred_tissues))
    out: dict[str, MetricsReport] = {}
    for tissue in tissues:
        gt_idx = np.array([i for i, t in enumerate(gt_tags) if t == tissue], dtype=np.int64)
        sub_ann = annotations.subset(gt_idx) if len(gt_idx) else annotations.subset(np.array([], dtype=np.int64))
        sub_det = [d for d, t in zip(detections, pred_tissues) if t == tissue]
        report = evaluate(sub_ann, sub_det, radius_um, class_names, strategy=strategy)
        if len(gt_idx) == 0 or not sub_det:
            report.flags = report.flags + (f"tissue[{tissue}]: empty group",)
        out[tissue] = report
    return out


@dataclass
class SweepResult:
    best_tau: float
    curve: list[tuple[float, float, float, float]]  # tau, F_det, macro-F, harmonic mean
    flags: tuple[str, ...] = ()


def sweep_threshold(
    detections: Sequence[Detection],
    annotations: AnnotationSet,
    grid: Sequence[float],
    radius_um: float = DEFAULT_RADIUS_UM,
    class_names: Sequence[str] = DEFAULT_CLASS_NAMES,
) -> SweepResult:
    """Evaluate every threshold in the ascending grid and return the one
    maximizing the harmonic mean of detection F1 and macro-average
    classification F1 (ties go to the larger threshold)."""
    grid = [float(t) for t in grid]
    if not grid:
        raise ValueError("threshold grid must be nonempty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("threshold grid must be strictly ascending")
    curve: list[tuple[float, float, float, float]] = []
    best_tau, best_h = grid[0], -1.0
    for tau in grid:
        report = evaluate(annotations, detections, radius_um, class_names, threshold=tau)
        denom = report.f_det + report.macro_f
        h = 2.0 * report.f_det * report.macro_f / denom if denom > 0 else 0.0
        curve.append((tau, report.f_det, report.macro_f, h))
        if h >= best_h:
            best_tau, best_h = tau, h
    flags: tuple[str, ...] = ()
    if best_h <= 0.0:
        flags = ("sweep: harmonic mean is 0 everywhere; returning largest threshold",)
        best_tau = grid[-1]
    return SweepResult(best_tau=best_tau, curve=curve, flags=flags)
