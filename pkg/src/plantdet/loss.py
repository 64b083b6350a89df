"""Target assignment and the composite detection loss.

total = batch_size * (box_w * L_box + obj_w * L_obj + cls_w * L_cls) where

* ``L_box`` is the mean of ``1 - CIoU`` over positive anchors,
* ``L_obj`` is the balance-weighted BCE between objectness logits and the
  (detached) IoU of each positive's decoded box with its ground truth,
* ``L_cls`` is the BCE of class logits against one-hot targets at positives.

Detached quantities (the CIoU ``alpha`` factor and objectness targets) are
returned in ``components["frozen"]`` and can be passed back in, which turns
the loss into a smooth function suitable for finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .boxes import STRIDES, AnchorSet
from .errors import ContractError, DataError
from .tensor import Tensor

ANCHOR_RATIO = 4.0
NEIGHBOR_OFFSET = 0.5
CIOU_EPS = 1e-7
V_SCALE = 4.0 / math.pi ** 2


# -- CIoU -----------------------------------------------------------------------

def ciou_terms(px, py, pw, ph, gt: np.ndarray, alpha: np.ndarray | None = None):
    """CIoU between predicted centre/size tensors and constant ``gt[P, 4]`` (cx, cy, w, h).

    Returns ``(ciou, iou, alpha)``: ``ciou`` is a tensor, the other two are
    detached arrays.  ``alpha`` is computed from the inputs unless given.
    """
    dtype = px.dtype
    gx, gy, gw, gh = (Tensor(gt[:, i], dtype=dtype) for i in range(4))
    p_x1, p_x2 = px - pw * 0.5, px + pw * 0.5
    p_y1, p_y2 = py - ph * 0.5, py + ph * 0.5
    g_x1, g_x2 = gx - gw * 0.5, gx + gw * 0.5
    g_y1, g_y2 = gy - gh * 0.5, gy + gh * 0.5

    iw = T.clamp(T.minimum(p_x2, g_x2) - T.maximum(p_x1, g_x1), 0.0)
    ih = T.clamp(T.minimum(p_y2, g_y2) - T.maximum(p_y1, g_y1), 0.0)
    inter = iw * ih
    # areas from the same corners as the intersection, so identical boxes give IoU == 1 exactly
    union = (p_x2 - p_x1) * (p_y2 - p_y1) + (g_x2 - g_x1) * (g_y2 - g_y1) - inter
    iou = inter / union

    cw = T.maximum(p_x2, g_x2) - T.minimum(p_x1, g_x1)
    ch = T.maximum(p_y2, g_y2) - T.minimum(p_y1, g_y1)
    c2 = cw * cw + ch * ch
    dx, dy = gx - px, gy - py
    rho2 = dx * dx + dy * dy
    dv = T.atan(gw / gh) - T.atan(pw / ph)
    v = dv * dv * V_SCALE
    iou_np = iou.data.astype(np.float64)
    if alpha is None:
        vd = v.data.astype(np.float64)
        alpha = vd / ((1.0 - iou_np) + vd + CIOU_EPS)
    ciou_t = iou - rho2 / c2 - v * Tensor(alpha, dtype=dtype)
    return ciou_t, iou_np, alpha


def _check_boxes(b: np.ndarray, what: str) -> None:
    if np.any(b[..., 2] <= b[..., 0]) or np.any(b[..., 3] <= b[..., 1]):
        raise ContractError(f"{what} boxes need positive width and height")


def ciou(pred, gt):
    """Complete IoU of corner-format boxes; broadcasts over leading axes.

    Returns a float for single boxes, otherwise an array.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    scalar = p.ndim == 1 and g.ndim == 1
    p, g = np.broadcast_arrays(p.reshape(-1, 4) if p.ndim == 1 else p,
                               g.reshape(-1, 4) if g.ndim == 1 else g)
    shape = p.shape[:-1]
    p, g = p.reshape(-1, 4), g.reshape(-1, 4)
    _check_boxes(p, "predicted")
    _check_boxes(g, "ground-truth")
    pc = np.stack([(p[:, 0] + p[:, 2]) / 2, (p[:, 1] + p[:, 3]) / 2,
                   p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]], axis=1)
    gc = np.stack([(g[:, 0] + g[:, 2]) / 2, (g[:, 1] + g[:, 3]) / 2,
                   g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]], axis=1)
    with T.no_grad():
        cols = [Tensor(pc[:, i], dtype=np.float64) for i in range(4)]
        out, _, _ = ciou_terms(*cols, gc)
    vals = out.data.reshape(shape)
    return float(vals.reshape(-1)[0]) if scalar else vals


# -- BCE ----------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets, pos_weight: float = 1.0) -> Tensor:
    """Mean of ``w*t*softplus(-z) + (1-t)*softplus(z)``."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ContractError(f"target shape {t.shape} != logits shape {logits.shape}")
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ContractError("BCE targets must lie in [0, 1]")
    tt = Tensor(t, dtype=logits.dtype)
    pos = T.softplus(-logits) * (tt * pos_weight)
    neg = T.softplus(logits) * (1.0 - tt)
    return (pos + neg).mean()


# -- assignment ---------------------------------------------------------------------

@dataclass
class LevelTargets:
    """Positives of one pyramid level, canonically sorted.

    ``gt`` holds (cx, cy, w, h) in grid units relative to the assigned cell,
    i.e. the centre is an offset from cell (gx, gy).
    """

    batch: np.ndarray
    anchor: np.ndarray
    gy: np.ndarray
    gx: np.ndarray
    gt: np.ndarray
    cls: np.ndarray
    grid: tuple[int, int]

    def __len__(self) -> int:
        return len(self.batch)

    def gt_xyxy_pixels(self, stride: float) -> np.ndarray:
        cx = (self.gt[:, 0] + self.gx) * stride
        cy = (self.gt[:, 1] + self.gy) * stride
        w, h = self.gt[:, 2] * stride, self.gt[:, 3] * stride
        return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


@dataclass
class TargetAssignment:
    levels: list[LevelTargets] = field(default_factory=list)

    @property
    def num_positives(self) -> int:
        return sum(len(lv) for lv in self.levels)


def _as_annotation_array(ann) -> np.ndarray:
    if hasattr(ann, "to_array"):
        return ann.to_array()
    arr = np.asarray(
        [[a.cls, a.cx, a.cy, a.w, a.h] if hasattr(a, "cls") else a for a in ann] if isinstance(ann, list) else ann,
        dtype=np.float64)
    return arr.reshape(-1, 5)


def assign_targets(annotations, anchors: AnchorSet, level_shapes, strides=STRIDES,
                   sources: list[str] | None = None) -> TargetAssignment:
    """Match ground truths to (anchor, cell) pairs on every level.

    ``annotations`` is one entry per image: an ``[n, 5]`` array of
    ``(class, cx, cy, w, h)`` normalized rows (or a list of Annotation).
    A box matches an anchor when every side ratio is within ``ANCHOR_RATIO``;
    it is placed in its containing cell plus the nearer neighbour along x and
    along y (when those exist).
    """
    per_level = anchors.per_level
    arrays = [_as_annotation_array(a) for a in annotations]
    for i, arr in enumerate(arrays):
        if arr.size and (np.any(arr[:, 1:] < 0.0) or np.any(arr[:, 1:] > 1.0)):
            where = sources[i] if sources else f"image {i}"
            bad = int(np.nonzero(np.any((arr[:, 1:] < 0) | (arr[:, 1:] > 1), axis=1))[0][0])
            raise DataError(f"{where}: annotation line {bad + 1} has coordinates outside [0, 1]")
    rows = [np.column_stack([np.full(len(a), i), a]) for i, a in enumerate(arrays) if len(a)]
    gts = np.concatenate(rows) if rows else np.zeros((0, 6))

    result = TargetAssignment()
    for lvl, ((h, w), stride) in enumerate(zip(level_shapes, strides)):
        anchor_grid = per_level[lvl] / stride
        entries = []
        for a_idx, (aw, ah) in enumerate(anchor_grid):
            for b, c, cx, cy, bw, bh in gts:
                gx, gy = cx * w, cy * h
                gw, gh = bw * w, bh * h
                if gw <= 0 or gh <= 0:
                    continue
                r = max(gw / aw, aw / gw, gh / ah, ah / gh)
                if not r < ANCHOR_RATIO:
                    continue
                cell_x, cell_y = min(int(gx), w - 1), min(int(gy), h - 1)
                cells = [(cell_x, cell_y)]
                nx = cell_x - 1 if gx - cell_x < NEIGHBOR_OFFSET else cell_x + 1
                ny = cell_y - 1 if gy - cell_y < NEIGHBOR_OFFSET else cell_y + 1
                if 0 <= nx < w:
                    cells.append((nx, cell_y))
                if 0 <= ny < h:
                    cells.append((cell_x, ny))
                for ix, iy in cells:
                    entries.append((int(b), a_idx, iy, ix, gx - ix, gy - iy, gw, gh, int(c)))
        entries.sort()
        arr = np.asarray(entries, dtype=np.float64).reshape(-1, 9)
        result.levels.append(LevelTargets(
            batch=arr[:, 0].astype(np.int64), anchor=arr[:, 1].astype(np.int64),
            gy=arr[:, 2].astype(np.int64), gx=arr[:, 3].astype(np.int64),
            gt=arr[:, 4:8].copy(), cls=arr[:, 8].astype(np.int64), grid=(h, w)))
    return result


# -- loss -------------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    box: float = 0.05
    obj: float = 1.0
    cls: float | None = None  # None -> 0.5 * nc / 80
    balance: tuple[float, float, float] = (4.0, 1.0, 0.4)
    obj_pos_weight: float = 1.0
    cls_pos_weight: float = 1.0
    obj_target: str = "iou"

    def __post_init__(self):
        vals = [self.box, self.obj, *self.balance, self.obj_pos_weight, self.cls_pos_weight]
        if self.cls is not None:
            vals.append(self.cls)
        if any(v < 0 for v in vals):
            raise ContractError("loss weights must be non-negative")
        if self.obj_target not in ("iou", "ciou"):
            raise ContractError(f"obj_target must be 'iou' or 'ciou', got {self.obj_target!r}")

    def cls_weight(self, nc: int) -> float:
        return 0.5 * nc / 80.0 if self.cls is None else self.cls

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.box * factor, self.obj * factor,
                           self.cls * factor if self.cls is not None else None,
                           self.balance, self.obj_pos_weight, self.cls_pos_weight, self.obj_target)


def decode_positive(ps: Tensor, anchor_grid: np.ndarray):
    """Centre offsets and sizes (grid units) for gathered positives ``ps[P, no]``."""
    s = T.sigmoid(ps[:, :4])
    pxy = s[:, :2] * 2.0 - 0.5
    pwh = (s[:, 2:4] * 2.0) ** 2 * Tensor(anchor_grid, dtype=ps.dtype)
    return pxy[:, 0], pxy[:, 1], pwh[:, 0], pwh[:, 1]


def detection_loss(preds: list[Tensor], assignment: TargetAssignment, weights: LossWeights,
                   anchors: AnchorSet, strides=STRIDES, frozen: dict | None = None):
    """Composite loss over the three raw prediction levels.

    Returns ``(total, components)`` with float entries ``box``, ``obj``, ``cls``,
    ``ciou`` (mean CIoU over positives) and the ``frozen`` detached values.
    """
    if len(preds) != len(assignment.levels):
        raise ContractError("prediction levels and assignment levels differ")
    dtype = preds[0].dtype
    bs = preds[0].shape[0]
    nc = preds[0].shape[-1] - 5
    per_level = anchors.per_level
    box_terms, cls_terms, obj_terms = [], [], []
    ciou_vals = []
    new_frozen = {"alpha": [], "obj": []}

    for lvl, (p, tg) in enumerate(zip(preds, assignment.levels)):
        b, na, h, w, no = p.shape
        if (h, w) != tg.grid:
            raise ContractError(f"level {lvl}: grid {(h, w)} != assignment grid {tg.grid}")
        tobj = np.zeros((b, na, h, w), dtype=np.float64)
        if len(tg):
            idx = (tg.batch, tg.anchor, tg.gy, tg.gx)
            ps = p[idx]
            anchor_grid = per_level[lvl][tg.anchor] / strides[lvl]
            px, py, pw, ph = decode_positive(ps, anchor_grid)
            alpha = None if frozen is None else frozen["alpha"][lvl]
            c, iou, alpha = ciou_terms(px, py, pw, ph, tg.gt, alpha)
            box_terms.append((1.0 - c).mean())
            ciou_vals.append(c.data.astype(np.float64))
            if frozen is None:
                score = iou if weights.obj_target == "iou" else c.data.astype(np.float64)
                score = np.clip(score, 0.0, 1.0)
                # Several ground truths may land on one cell; keep the best (order-free).
                np.maximum.at(tobj, idx, score)
            else:
                tobj = frozen["obj"][lvl]
            onehot = np.zeros((len(tg), nc), dtype=np.float64)
            onehot[np.arange(len(tg)), tg.cls] = 1.0
            cls_terms.append(bce_with_logits(ps[:, 5:], onehot, weights.cls_pos_weight))
        else:
            alpha = np.zeros(0)
            if frozen is not None:
                tobj = frozen["obj"][lvl]
        new_frozen["alpha"].append(alpha)
        new_frozen["obj"].append(tobj)
        obj_terms.append(bce_with_logits(p[..., 4], tobj, weights.obj_pos_weight)
                         * weights.balance[lvl])

    zero = Tensor(0.0, dtype=dtype)
    l_box = _sum(box_terms, zero)
    l_cls = _sum(cls_terms, zero)
    l_obj = _sum(obj_terms, zero)
    total = (l_box * weights.box + l_obj * weights.obj + l_cls * weights.cls_weight(nc)) * float(bs)
    all_ciou = np.concatenate(ciou_vals) if ciou_vals else np.zeros(0)
    components = {
        "box": float(l_box.data) * weights.box,
        "obj": float(l_obj.data) * weights.obj,
        "cls": float(l_cls.data) * weights.cls_weight(nc),
        "ciou": float(all_ciou.mean()) if all_ciou.size else float("nan"),
        "num_positives": assignment.num_positives,
        "frozen": new_frozen,
    }
    return total, components


def _sum(terms: list[Tensor], zero: Tensor) -> Tensor:
    if not terms:
        return zero
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out
