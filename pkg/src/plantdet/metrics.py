"""Precision, recall and AP@0.5 over a set of images."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import box_iou
from .errors import ContractError
from .postprocess import DetectionArrays

MATCH_IOU = 0.5
SMALL_AREA = 32 ** 2
MEDIUM_AREA = 96 ** 2
REFERENCE_SIDE = 640


@dataclass
class PRCurve:
    """Cumulative precision/recall in descending score order."""

    scores: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def __post_init__(self):
        if not (len(self.scores) == len(self.precision) == len(self.recall)):
            raise ContractError("PR curve arrays differ in length")


@dataclass
class GroundTruth:
    """One image's ground truth: classes and xyxy boxes in the same pixel frame as detections."""

    boxes: np.ndarray
    classes: np.ndarray

    @classmethod
    def from_normalized(cls, ann: np.ndarray, height: int, width: int) -> "GroundTruth":
        ann = np.asarray(ann, dtype=np.float64).reshape(-1, 5)
        cx, cy = ann[:, 1] * width, ann[:, 2] * height
        w, h = ann[:, 3] * width, ann[:, 4] * height
        boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
        return cls(boxes, ann[:, 0].astype(np.int64))


def match_class(dets: list[DetectionArrays], gts: list[GroundTruth], cls: int,
                iou_threshold: float = MATCH_IOU):
    """Greedy matching for one class across images.

    Detections are visited in descending score (ties: image, then position);
    each takes the unmatched ground truth of its image with the highest
    IoU >= ``iou_threshold``.  Returns ``(scores, tp_flags, n_gt)`` in visit order.
    """
    entries = []
    for img, d in enumerate(dets):
        for j in np.nonzero(d.classes == cls)[0]:
            entries.append((-float(d.scores[j]), img, int(j)))
    entries.sort()
    gt_boxes = [g.boxes[g.classes == cls] for g in gts]
    used = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    n_gt = sum(len(b) for b in gt_boxes)
    scores = np.array([-e[0] for e in entries], dtype=np.float64)
    tp = np.zeros(len(entries), dtype=bool)
    for k, (_, img, j) in enumerate(entries):
        cand = gt_boxes[img]
        if not len(cand):
            continue
        ious = box_iou(dets[img].boxes[j], cand)[0]
        ious[used[img]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            used[img][best] = True
            tp[k] = True
    return scores, tp, n_gt


def pr_curve(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> PRCurve:
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    precision = ctp / np.maximum(ctp + cfp, 1)
    recall = ctp / n_gt if n_gt else np.zeros(len(tp))
    return PRCurve(np.asarray(scores, dtype=np.float64), precision.astype(np.float64),
                   recall.astype(np.float64))


def ap_from_curve(curve: PRCurve, method: str = "all") -> float:
    """Area under the precision envelope ("all") or the 11-point VOC-2007 mean ("11")."""
    rec, prec = curve.recall, curve.precision
    if method == "11":
        pts = [prec[rec >= t].max() if np.any(rec >= t) else 0.0 for t in np.linspace(0, 1, 11)]
        return float(np.mean(pts))
    if method != "all":
        raise ContractError(f"AP method must be 'all' or '11', got {method!r}")
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def average_precision(dets: list[DetectionArrays], gts: list[GroundTruth], cls: int,
                      iou_threshold: float = MATCH_IOU, method: str = "all"):
    """AP of one class; ``None`` when the class has no ground truth."""
    scores, tp, n_gt = match_class(dets, gts, cls, iou_threshold)
    curve = pr_curve(scores, tp, n_gt)
    if n_gt == 0:
        return None, curve
    return ap_from_curve(curve, method), curve


def size_tag(mean_area: float) -> str:
    if mean_area < SMALL_AREA:
        return "small"
    if mean_area < MEDIUM_AREA:
        return "medium"
    return "large"


@dataclass
class EvalResult:
    class_names: list[str]
    ap: list[float | None]
    precision: list[float]
    recall: list[float]
    n_gt: list[int]
    size_tags: list[str | None]
    map50: float
    mean_precision: float
    mean_recall: float
    pooled_precision: float
    pooled_recall: float
    conf_threshold: float
    num_images: int
    curves: list[PRCurve] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "num_images": self.num_images,
            "map50": self.map50,
            "precision": self.mean_precision,
            "recall": self.mean_recall,
            "pooled_precision": self.pooled_precision,
            "pooled_recall": self.pooled_recall,
            "conf_threshold": self.conf_threshold,
            "classes": [
                {"id": i, "name": n, "ap50": a, "precision": p, "recall": r, "n_gt": g, "size": s}
                for i, (n, a, p, r, g, s) in enumerate(zip(self.class_names, self.ap, self.precision,
                                                           self.recall, self.n_gt, self.size_tags))
            ],
        }


def _best_f1_threshold(scores: np.ndarray, tp: np.ndarray, n_gt: int):
    if not len(scores) or n_gt == 0:
        return 1.0, 0.0, 0.0
    order = np.lexsort((np.arange(len(scores)), -scores))
    s, t = scores[order], tp[order]
    ctp = np.cumsum(t)
    prec = ctp / np.arange(1, len(t) + 1)
    rec = ctp / n_gt
    # A threshold admits every detection with an equal score, so only evaluate at group ends.
    ends = np.append(np.nonzero(s[1:] != s[:-1])[0], len(s) - 1)
    f1 = 2 * prec[ends] * rec[ends] / np.maximum(prec[ends] + rec[ends], 1e-16)
    k = ends[int(np.argmax(f1))]
    return float(s[k]), float(prec[k]), float(rec[k])


def evaluate_detections(dets: list[DetectionArrays], gts: list[GroundTruth], nc: int,
                        class_names: list[str] | None = None, iou_threshold: float = MATCH_IOU,
                        method: str = "all", image_size: tuple[int, int] | None = None) -> EvalResult:
    """Per-class AP and P/R at the pooled best-F1 confidence threshold.

    ``image_size`` (h, w) lets size tags be computed at the 640x640 reference scale.
    """
    if len(dets) != len(gts):
        raise ContractError(f"{len(dets)} detection sets for {len(gts)} images")
    names = class_names or [str(i) for i in range(nc)]
    per_class = [match_class(dets, gts, c, iou_threshold) for c in range(nc)]
    aps, curves, tags = [], [], []
    for c, (scores, tp, n_gt) in enumerate(per_class):
        curve = pr_curve(scores, tp, n_gt)
        curves.append(curve)
        aps.append(ap_from_curve(curve, method) if n_gt else None)
        areas = [np.prod(g.boxes[g.classes == c, 2:] - g.boxes[g.classes == c, :2], axis=1)
                 for g in gts]
        areas = np.concatenate(areas) if areas else np.zeros(0)
        if len(areas):
            scale = 1.0 if image_size is None else (REFERENCE_SIDE ** 2) / (image_size[0] * image_size[1])
            tags.append(size_tag(float(areas.mean()) * scale))
        else:
            tags.append(None)

    pooled_s = np.concatenate([p[0] for p in per_class]) if per_class else np.zeros(0)
    pooled_t = np.concatenate([p[1] for p in per_class]) if per_class else np.zeros(0, bool)
    total_gt = sum(p[2] for p in per_class)
    thr, pooled_p, pooled_r = _best_f1_threshold(pooled_s, pooled_t, total_gt)

    precision, recall = [], []
    for scores, tp, n_gt in per_class:
        sel = scores >= thr
        k = int(sel.sum())
        ntp = int(tp[sel].sum())
        precision.append(ntp / k if k else 0.0)
        recall.append(ntp / n_gt if n_gt else 0.0)
    valid = [c for c in range(nc) if per_class[c][2] > 0]
    map50 = float(np.mean([aps[c] for c in valid])) if valid else 0.0
    mp = float(np.mean([precision[c] for c in valid])) if valid else 0.0
    mr = float(np.mean([recall[c] for c in valid])) if valid else 0.0
    return EvalResult(names, aps, precision, recall, [p[2] for p in per_class], tags, map50, mp, mr,
                      pooled_p, pooled_r, thr, len(gts), curves)
