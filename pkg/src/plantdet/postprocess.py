"""Raw head output -> scored, class-labelled, NMS-filtered detections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import STRIDES, AnchorSet, box_iou, decode_level
from .errors import ContractError

CONF_THRESHOLD = 0.001
NMS_IOU = 0.6
MAX_DET = 300
SCORE_CAP = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class Detection:
    cls: int
    score: float
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 in input pixels

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ContractError(f"degenerate detection box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ContractError(f"score {self.score} outside [0, 1]")


@dataclass
class DetectionArrays:
    """Column form of one image's detections."""

    boxes: np.ndarray   # [N, 4]
    scores: np.ndarray  # [N]
    classes: np.ndarray  # [N] int

    def __len__(self) -> int:
        return len(self.scores)

    def take(self, idx) -> "DetectionArrays":
        return DetectionArrays(self.boxes[idx], self.scores[idx], self.classes[idx])

    def to_list(self) -> list[Detection]:
        return [Detection(int(c), float(s), tuple(float(v) for v in b))
                for b, s, c in zip(self.boxes, self.scores, self.classes)]

    @classmethod
    def from_list(cls, dets: list[Detection]) -> "DetectionArrays":
        if not dets:
            return cls.empty()
        return cls(np.array([d.box for d in dets], dtype=np.float64),
                   np.array([d.score for d in dets], dtype=np.float64),
                   np.array([d.cls for d in dets], dtype=np.int64))

    @classmethod
    def empty(cls) -> "DetectionArrays":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _as_array(t) -> np.ndarray:
    return np.asarray(getattr(t, "data", t), dtype=np.float64)


def decode_arrays(raw, anchors: AnchorSet | None = None, conf_threshold: float = CONF_THRESHOLD,
                  strides=STRIDES) -> list[DetectionArrays]:
    """Decode every cell of the three levels and keep scores >= ``conf_threshold``.

    score = sigmoid(obj) * max_c sigmoid(cls_c); class = argmax_c.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ContractError(f"confidence threshold {conf_threshold} outside [0, 1]")
    anchors = anchors or AnchorSet()
    levels = [_as_array(r) for r in raw]
    batch = levels[0].shape[0]
    boxes, scores, classes = [], [], []
    for lvl, arr in enumerate(levels):
        b = decode_level(arr, anchors.per_level[lvl], strides[lvl])
        cls_prob = _sigmoid(arr[..., 5:])
        boxes.append(b.reshape(batch, -1, 4))
        # A product of probabilities never reaches 1; saturated float sigmoids would.
        score = np.minimum(_sigmoid(arr[..., 4]) * cls_prob.max(-1), SCORE_CAP)
        scores.append(score.reshape(batch, -1))
        classes.append(cls_prob.argmax(-1).reshape(batch, -1))
    boxes = np.concatenate(boxes, axis=1)
    scores = np.concatenate(scores, axis=1)
    classes = np.concatenate(classes, axis=1)
    out = []
    for i in range(batch):
        keep = scores[i] >= conf_threshold
        # Saturated size logits can underflow to zero-area boxes; they are not detections.
        keep &= (boxes[i, :, 2] > boxes[i, :, 0]) & (boxes[i, :, 3] > boxes[i, :, 1])
        out.append(DetectionArrays(boxes[i][keep], scores[i][keep], classes[i][keep].astype(np.int64)))
    return out


def decode_predictions(raw, anchors: AnchorSet | None = None,
                       conf_threshold: float = CONF_THRESHOLD, strides=STRIDES) -> list[list[Detection]]:
    """Per-image lists of :class:`Detection` (no NMS)."""
    return [d.to_list() for d in decode_arrays(raw, anchors, conf_threshold, strides)]


def nms_indices(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray,
                iou_threshold: float = NMS_IOU) -> np.ndarray:
    """Per-class greedy NMS; returns kept indices ordered by (score desc, index asc)."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ContractError(f"IoU threshold {iou_threshold} outside [0, 1]")
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), -np.asarray(scores)))
    boxes = np.asarray(boxes, dtype=np.float64)
    classes = np.asarray(classes)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        rest = rest[(classes[rest] == classes[i]) & ~suppressed[rest]]
        if len(rest):
            ious = box_iou(boxes[i], boxes[rest])[0]
            suppressed[rest[ious > iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)


def nms(dets: list[Detection], iou_threshold: float = NMS_IOU, max_det: int = MAX_DET) -> list[Detection]:
    arr = DetectionArrays.from_list(dets)
    keep = nms_indices(arr.boxes, arr.scores, arr.classes, iou_threshold)[:max_det]
    return [dets[i] for i in keep]


def postprocess(raw, anchors: AnchorSet | None = None, conf_threshold: float = CONF_THRESHOLD,
                iou_threshold: float = NMS_IOU, max_det: int = MAX_DET,
                strides=STRIDES) -> list[DetectionArrays]:
    """decode -> confidence filter -> NMS -> cap at ``max_det``, per image."""
    out = []
    for d in decode_arrays(raw, anchors, conf_threshold, strides):
        keep = nms_indices(d.boxes, d.scores, d.classes, iou_threshold)[:max_det]
        out.append(d.take(keep))
    return out
