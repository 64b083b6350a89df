"""Inference on image files with results reported in original-pixel coordinates."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import read_image, resize_image, write_ppm
from .errors import DataError
from .model import DetectorModel
from .postprocess import DetectionArrays
from .train import predict

log = logging.getLogger(__name__)

PALETTE = ((255, 56, 56), (56, 56, 255), (255, 210, 0), (0, 200, 120), (200, 0, 255), (0, 190, 255))


@dataclass
class ImageResult:
    source: str
    detections: DetectionArrays | None
    error: str | None = None


def detect_image(model: DetectorModel, img: np.ndarray, img_size: int, mode: str = "stretch",
                 conf: float = 0.25, iou: float = 0.45, max_det: int = 300) -> DetectionArrays:
    """Detections for one HxWx3 uint8 image, boxes in its own pixel frame."""
    resized, tf = resize_image(img, img_size, mode)
    x = (resized.astype(np.float32) / 255.0).transpose(2, 0, 1)[None].copy()
    d = predict(model, x, conf, iou, max_det)[0]
    h, w = img.shape[:2]
    boxes = tf.inverse_pixels(d.boxes)
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, w)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, h)
    return DetectionArrays(boxes, d.scores, d.classes)


def format_detections(dets: DetectionArrays, class_names) -> str:
    """One ``name score x1 y1 x2 y2`` line per detection, best score first."""
    return "".join(f"{class_names[int(c)]} {s:.4f} {b[0]:.1f} {b[1]:.1f} {b[2]:.1f} {b[3]:.1f}\n"
                   for b, s, c in zip(dets.boxes, dets.scores, dets.classes))


def draw_detections(img: np.ndarray, dets: DetectionArrays, class_names) -> np.ndarray:
    im = Image.fromarray(img)
    draw = ImageDraw.Draw(im)
    for b, s, c in zip(dets.boxes, dets.scores, dets.classes):
        colour = PALETTE[int(c) % len(PALETTE)]
        draw.rectangle([float(v) for v in b], outline=colour, width=1)
        draw.text((float(b[0]) + 1, float(b[1]) + 1), f"{class_names[int(c)]} {s:.2f}", fill=colour)
    return np.asarray(im).copy()


def run_detect(model: DetectorModel, paths, out_dir, img_size: int, mode: str = "stretch",
               conf: float = 0.25, iou: float = 0.45, max_det: int = 300,
               draw: bool = False) -> list[ImageResult]:
    """Detect on every file; unreadable images are recorded and skipped."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for p in paths:
        p = Path(p)
        try:
            img = read_image(p)
        except (DataError, OSError) as exc:
            log.error("skipping %s: %s", p, exc)
            results.append(ImageResult(str(p), None, str(exc)))
            continue
        dets = detect_image(model, img, img_size, mode, conf, iou, max_det)
        (out / f"{p.stem}.txt").write_text(format_detections(dets, model.class_names), encoding="utf-8")
        if draw:
            write_ppm(out / f"{p.stem}_det.ppm", draw_detections(img, dets, model.class_names))
        results.append(ImageResult(str(p), dets))
    errors = [r for r in results if r.error]
    if errors:
        (out / "errors.txt").write_text("".join(f"{r.source}: {r.error}\n" for r in errors), encoding="utf-8")
    return results
