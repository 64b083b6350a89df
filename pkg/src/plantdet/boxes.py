"""Box geometry, anchors, and the grid decode shared by loss and post-processing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

STRIDES = (8, 16, 32)

# YOLOv5 P3/P4/P5 anchors in 640x640 input pixels.
DEFAULT_ANCHORS = (
    (10, 13), (16, 30), (33, 23),
    (30, 61), (62, 45), (59, 119),
    (116, 90), (156, 198), (373, 326),
)


@dataclass(frozen=True)
class AnchorSet:
    """Nine (w, h) priors in input pixels, three per level, each level sorted by area."""

    sizes: tuple[tuple[float, float], ...] = DEFAULT_ANCHORS

    def __post_init__(self):
        arr = np.asarray(self.sizes, dtype=np.float64)
        if arr.shape != (9, 2):
            raise ContractError(f"need 9 anchor (w, h) pairs, got shape {arr.shape}")
        if np.any(arr <= 0):
            raise ContractError("anchor dimensions must be positive")
        areas = (arr[:, 0] * arr[:, 1]).reshape(3, 3)
        if np.any(np.diff(areas, axis=1) < 0):
            raise ContractError("anchors within a level must be sorted by ascending area")
        object.__setattr__(self, "sizes", tuple((float(w), float(h)) for w, h in arr))

    @property
    def per_level(self) -> np.ndarray:
        """``[3 levels, 3 anchors, 2]`` array in pixels."""
        return np.asarray(self.sizes, dtype=np.float64).reshape(3, 3, 2)

    @classmethod
    def from_flat(cls, values) -> "AnchorSet":
        vals = [float(v) for v in values]
        return cls(tuple(zip(vals[0::2], vals[1::2])))

    def scaled(self, factor: float) -> "AnchorSet":
        return AnchorSet(tuple((w * factor, h * factor) for w, h in self.sizes))


def iou_xyxy(a, b) -> float:
    """IoU of two corner-format boxes; 0 when the union is empty."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    if ax2 < ax1 or ay2 < ay1 or bx2 < bx1 or by2 < by1:
        raise ContractError(f"inverted box in iou: {tuple(a)} / {tuple(b)}")
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU matrix ``[N, M]`` for corner-format boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def decode_box(raw, cell, anchor, stride: float) -> np.ndarray:
    """Map raw ``(tx, ty, tw, th)`` at grid ``cell=(gx, gy)`` to an xyxy pixel box.

    centre = (2*sigmoid(t) - 0.5 + g) * stride, size = (2*sigmoid(t))^2 * anchor.
    """
    t = np.asarray(raw, dtype=np.float64)
    s = _sigmoid(t)
    cx = (2.0 * s[..., 0] - 0.5 + cell[0]) * stride
    cy = (2.0 * s[..., 1] - 0.5 + cell[1]) * stride
    w = (2.0 * s[..., 2]) ** 2 * anchor[0]
    h = (2.0 * s[..., 3]) ** 2 * anchor[1]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def decode_level(raw: np.ndarray, anchors: np.ndarray, stride: float) -> np.ndarray:
    """Vectorized :func:`decode_box` over ``raw[B, na, H, W, >=4]`` -> ``[B, na, H, W, 4]``."""
    _, na, h, w, _ = raw.shape
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    aw = anchors[:, 0].reshape(1, na, 1, 1)
    ah = anchors[:, 1].reshape(1, na, 1, 1)
    return decode_box(raw[..., :4], (gx, gy), (aw, ah), stride)
