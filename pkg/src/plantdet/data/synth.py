"""Synthetic dense-leaf scenes with exact YOLO labels.

Each class owns a shape family (ellipse with an eccentricity band, or a lobed
outline with a fixed lobe count) and a hue band.  Leaves are painted
back-to-front; a leaf is labelled only if enough of it stays visible, and its
box is the bounding box of its visible pixels.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..errors import ConfigError
from .imageio import write_ppm
from .labels import Annotation, format_yolo_label
from .split import DatasetIndex, split_dataset

BACKGROUND = (96, 72, 48)
OUTLINE_POINTS = 48


@dataclass(frozen=True)
class SyntheticSceneConfig:
    image_size: int = 128
    classes: int = 3
    leaves: tuple[int, int] = (2, 4)
    size_range: tuple[float, float] = (0.18, 0.38)  # leaf length as a fraction of the image side
    occlusion: float = 0.0
    min_visible: float = 0.3
    hue_spread: float = 0.75
    background_noise: float = 10.0
    seed: int = 0
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.classes < 1:
            raise ConfigError("synthetic scenes need at least one class")
        if self.image_size <= 0 or self.image_size % 32:
            raise ConfigError(f"image size {self.image_size} must be a positive multiple of 32")
        lo, hi = self.leaves
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad leaves-per-image range {self.leaves}")
        a, b = self.size_range
        if not 0 < a <= b < 1:
            raise ConfigError(f"bad leaf size range {self.size_range}")
        if not 0.0 <= self.occlusion <= 1.0:
            raise ConfigError("occlusion density must lie in [0, 1]")
        if self.class_names and len(self.class_names) != self.classes:
            raise ConfigError(f"{len(self.class_names)} class names for {self.classes} classes")

    @property
    def names(self) -> list[str]:
        return list(self.class_names) or [f"plant{k:02d}" for k in range(self.classes)]

    def family(self, k: int) -> dict:
        """Shape and colour parameters of class ``k``."""
        hue = (0.12 + self.hue_spread * k / max(self.classes, 1)) % 1.0
        if k % 2 == 0:
            ecc = 0.35 + 0.5 * ((k // 2) % 3) / 2  # minor/major ratio band centre
            return {"kind": "ellipse", "ratio": (ecc - 0.08, ecc + 0.08), "hue": hue}
        return {"kind": "lobed", "lobes": 3 + (k // 2) % 4, "depth": (0.18, 0.3), "hue": hue}


def _outline(fam: dict, length: float, angle: float, rng) -> np.ndarray:
    theta = np.linspace(0, 2 * math.pi, OUTLINE_POINTS, endpoint=False)
    half = length / 2
    if fam["kind"] == "ellipse":
        ratio = rng.uniform(*fam["ratio"])
        x, y = half * np.cos(theta), half * ratio * np.sin(theta)
    else:
        depth = rng.uniform(*fam["depth"])
        r = half * (1 - depth + depth * np.cos(fam["lobes"] * theta))
        x, y = r * np.cos(theta), r * np.sin(theta)
    c, s = math.cos(angle), math.sin(angle)
    return np.stack([x * c - y * s, x * s + y * c], axis=1)


def _colour(hue: float, rng) -> tuple[int, int, int]:
    h = (hue + rng.uniform(-0.03, 0.03)) % 1.0
    r, g, b = colorsys.hsv_to_rgb(h, rng.uniform(0.55, 0.9), rng.uniform(0.55, 0.9))
    return int(r * 255), int(g * 255), int(b * 255)


def _mask(points: np.ndarray, size: int) -> np.ndarray:
    im = Image.new("L", (size, size), 0)
    ImageDraw.Draw(im).polygon([tuple(p) for p in points], fill=255)
    return np.asarray(im) > 0


def _box_of(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _disjoint(box, boxes, margin: int = 2) -> bool:
    x1, y1, x2, y2 = box
    return all(x2 + margin <= b[0] or b[2] + margin <= x1 or y2 + margin <= b[1] or b[3] + margin <= y1
               for b in boxes)


def render_scene(cfg: SyntheticSceneConfig, rng: np.random.Generator):
    """Return ``(image uint8 HxWx3, annotations, id_map)``; id_map holds 1-based leaf ids."""
    size = cfg.image_size
    img = np.empty((size, size, 3), dtype=np.float64)
    img[...] = BACKGROUND
    if cfg.background_noise > 0:
        img += rng.normal(0, cfg.background_noise, (size, size, 1))
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    ids = np.zeros((size, size), dtype=np.int32)
    drawn = []  # (cls, mask)
    boxes = []
    n = int(rng.integers(cfg.leaves[0], cfg.leaves[1] + 1))
    for _ in range(n):
        k = int(rng.integers(0, cfg.classes))
        fam = cfg.family(k)
        length = rng.uniform(*cfg.size_range) * size
        angle = rng.uniform(0, math.pi)
        shape = _outline(fam, length, angle, rng)
        lo, hi = shape.min(0), shape.max(0)
        free = rng.random() < cfg.occlusion
        placed = None
        for _attempt in range(1 if free else 60):
            cx = rng.uniform(-lo[0] + 1, size - hi[0] - 1)
            cy = rng.uniform(-lo[1] + 1, size - hi[1] - 1)
            mask = _mask(shape + [cx, cy], size)
            if not mask.any():
                continue
            box = _box_of(mask)
            if free or _disjoint(box, boxes):
                placed = mask, box
                break
        if placed is None:
            continue
        mask, box = placed
        colour = _colour(fam["hue"], rng)
        img[mask] = colour
        # A darker midrib along the major axis, clipped to the leaf.
        rib = Image.new("L", (size, size), 0)
        d = np.array([math.cos(angle), math.sin(angle)]) * length * 0.4
        ImageDraw.Draw(rib).line([tuple([cx, cy] - d), tuple([cx, cy] + d)], fill=255, width=1)
        rib_mask = (np.asarray(rib) > 0) & mask
        img[rib_mask] = [int(c * 0.6) for c in colour]
        drawn.append((k, mask))
        ids[mask] = len(drawn)
        boxes.append(box)

    anns = []
    for leaf_id, (k, mask) in enumerate(drawn, 1):
        visible = ids == leaf_id
        if visible.sum() < cfg.min_visible * mask.sum():
            continue
        x1, y1, x2, y2 = _box_of(visible)
        anns.append(Annotation(k, (x1 + x2) / 2 / size, (y1 + y2) / 2 / size,
                               (x2 - x1) / size, (y2 - y1) / size))
    return img, anns, ids


def image_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, i])


def generate_synthetic_dataset(cfg: SyntheticSceneConfig, n_images: int, out_dir,
                               split_seed: int | None = None) -> DatasetIndex:
    """Write ``images/*.ppm``, ``labels/*.txt``, ``classes.txt`` and ``manifest.json``."""
    if n_images < 1:
        raise ConfigError("need at least one synthetic image")
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc.strerror}") from exc
    images, labels = [], []
    for i in range(n_images):
        img, anns, _ = render_scene(cfg, image_rng(cfg.seed, i))
        stem = f"{i:05d}"
        write_ppm(root / "images" / f"{stem}.ppm", img)
        (root / "labels" / f"{stem}.txt").write_text(format_yolo_label(anns), encoding="utf-8")
        images.append(f"images/{stem}.ppm")
        labels.append(f"labels/{stem}.txt")
    (root / "classes.txt").write_text("".join(n + "\n" for n in cfg.names), encoding="utf-8")
    index = DatasetIndex(str(root), tuple(images), tuple(labels), tuple(cfg.names), {})
    if n_images >= 3:
        index = split_dataset(index, cfg.seed if split_seed is None else split_seed)
    else:
        index = DatasetIndex(index.root, index.images, index.labels, index.class_names,
                             {"train": tuple(range(n_images)), "val": (), "test": ()})
    index.save()
    return index

