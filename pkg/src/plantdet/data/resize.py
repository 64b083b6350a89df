"""Resize to the network input size and map boxes between the two frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..errors import ConfigError, DataError

PAD_VALUE = 114
MODES = ("stretch", "letterbox")


@dataclass(frozen=True)
class BoxTransform:
    """Affine map from source pixels to target pixels: ``x' = x * sx + px``."""

    sx: float
    sy: float
    px: float
    py: float
    src: tuple[int, int]  # (h, w)
    dst: tuple[int, int]

    @property
    def scale(self) -> tuple[float, float]:
        return self.sx, self.sy

    def forward_pixels(self, boxes) -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        return b * [self.sx, self.sy, self.sx, self.sy] + [self.px, self.py, self.px, self.py]

    def inverse_pixels(self, boxes) -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        return (b - [self.px, self.py, self.px, self.py]) / [self.sx, self.sy, self.sx, self.sy]

    def forward_normalized(self, ann: np.ndarray) -> np.ndarray:
        """Map ``[n, 5]`` (class, cx, cy, w, h) normalized rows into the target frame."""
        a = np.asarray(ann, dtype=np.float64).reshape(-1, 5).copy()
        (sh, sw), (dh, dw) = self.src, self.dst
        a[:, 1] = (a[:, 1] * sw * self.sx + self.px) / dw
        a[:, 2] = (a[:, 2] * sh * self.sy + self.py) / dh
        a[:, 3] = a[:, 3] * sw * self.sx / dw
        a[:, 4] = a[:, 4] * sh * self.sy / dh
        return a

    def inverse_normalized(self, ann: np.ndarray) -> np.ndarray:
        a = np.asarray(ann, dtype=np.float64).reshape(-1, 5).copy()
        (sh, sw), (dh, dw) = self.src, self.dst
        a[:, 1] = (a[:, 1] * dw - self.px) / self.sx / sw
        a[:, 2] = (a[:, 2] * dh - self.py) / self.sy / sh
        a[:, 3] = a[:, 3] * dw / self.sx / sw
        a[:, 4] = a[:, 4] * dh / self.sy / sh
        return a


def _target(size) -> tuple[int, int]:
    th, tw = (size, size) if np.isscalar(size) else tuple(size)
    th, tw = int(th), int(tw)
    if th <= 0 or tw <= 0 or th % 32 or tw % 32:
        raise ConfigError(f"target size {(th, tw)} must be positive multiples of 32")
    return th, tw


def plan_resize(src: tuple[int, int], size=640, mode: str = "stretch") -> BoxTransform:
    h, w = src
    if h <= 0 or w <= 0:
        raise DataError("zero-sized image")
    th, tw = _target(size)
    if mode == "stretch":
        return BoxTransform(tw / w, th / h, 0.0, 0.0, (h, w), (th, tw))
    if mode != "letterbox":
        raise ConfigError(f"resize mode must be one of {MODES}, got {mode!r}")
    r = min(th / h, tw / w)
    nw, nh = int(round(w * r)), int(round(h * r))
    left, top = (tw - nw) // 2, (th - nh) // 2
    return BoxTransform(nw / w, nh / h, float(left), float(top), (h, w), (th, tw))


def resize_image(img: np.ndarray, size=640, mode: str = "stretch"):
    """Return ``(resized uint8 image, BoxTransform)``."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise DataError(f"zero-sized or malformed image of shape {img.shape}")
    tf = plan_resize(img.shape[:2], size, mode)
    th, tw = tf.dst
    h, w = img.shape[:2]
    if (h, w) == (th, tw):
        return img.astype(np.uint8, copy=True), tf
    nw, nh = int(round(w * tf.sx)), int(round(h * tf.sy))
    scaled = np.asarray(Image.fromarray(img.astype(np.uint8)).resize((nw, nh), Image.BILINEAR))
    if mode == "stretch":
        return scaled.copy(), tf
    out = np.full((th, tw, 3), PAD_VALUE, dtype=np.uint8)
    top, left = int(tf.py), int(tf.px)
    out[top:top + nh, left:left + nw] = scaled
    return out, tf
