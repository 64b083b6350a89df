"""YOLO text labels and VOC XML import."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass

import numpy as np

from ..errors import DataError

SLACK = 1e-6


@dataclass(frozen=True)
class Annotation:
    """Ground-truth box: class id and normalized (cx, cy, w, h)."""

    cls: int
    cx: float
    cy: float
    w: float
    h: float

    def validate(self, nc: int | None = None, where: str = "") -> None:
        if self.cls < 0 or (nc is not None and self.cls >= nc):
            raise DataError(f"{where}class {self.cls} out of range for {nc} classes")
        vals = (self.cx, self.cy, self.w, self.h)
        if any(not (0.0 <= v <= 1.0) for v in vals):
            raise DataError(f"{where}coordinates {vals} outside [0, 1]")
        if self.w <= 0 or self.h <= 0:
            raise DataError(f"{where}box has zero width or height")
        lo_x, hi_x = self.cx - self.w / 2, self.cx + self.w / 2
        lo_y, hi_y = self.cy - self.h / 2, self.cy + self.h / 2
        if min(lo_x, lo_y) < -SLACK or max(hi_x, hi_y) > 1.0 + SLACK:
            raise DataError(f"{where}box {vals} extends outside the image")

    def as_row(self) -> list[float]:
        return [float(self.cls), self.cx, self.cy, self.w, self.h]


def annotations_to_array(anns: list[Annotation]) -> np.ndarray:
    if not anns:
        return np.zeros((0, 5), dtype=np.float64)
    return np.array([a.as_row() for a in anns], dtype=np.float64)


def parse_yolo_label(text: str, nc: int | None = None, source: str = "<label>") -> list[Annotation]:
    """``class cx cy w h`` per non-empty line; an empty file is a background image."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        where = f"{source}:{lineno}: "
        if len(parts) != 5:
            raise DataError(f"{where}expected 5 fields, got {len(parts)}")
        try:
            cls_f = float(parts[0])
            coords = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise DataError(f"{where}non-numeric token ({exc})") from None
        if cls_f != int(cls_f):
            raise DataError(f"{where}class id {parts[0]} is not an integer")
        ann = Annotation(int(cls_f), *coords)
        ann.validate(nc, where)
        out.append(ann)
    return out


def format_yolo_label(anns: list[Annotation]) -> str:
    return "".join(f"{a.cls} {a.cx:.6f} {a.cy:.6f} {a.w:.6f} {a.h:.6f}\n" for a in anns)


def read_yolo_label(path, nc: int | None = None) -> list[Annotation]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read label file {path}: {exc.strerror}") from None
    return parse_yolo_label(text, nc, str(path))


def _num(node, tag: str, where: str) -> float:
    el = node.find(tag)
    if el is None or el.text is None:
        raise DataError(f"{where}missing <{tag}>")
    try:
        return float(el.text)
    except ValueError:
        raise DataError(f"{where}<{tag}> is not a number: {el.text!r}") from None


def parse_voc_xml(text: str, class_names: list[str], source: str = "<xml>") -> list[Annotation]:
    """Convert a VOC annotation's corner-pixel boxes to normalized centre format."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise DataError(f"{source}: malformed XML ({exc})") from None
    size = root.find("size")
    if size is None:
        raise DataError(f"{source}: missing <size>")
    width = _num(size, "width", f"{source}: ")
    height = _num(size, "height", f"{source}: ")
    if width <= 0 or height <= 0:
        raise DataError(f"{source}: non-positive image size")
    lookup = {n: i for i, n in enumerate(class_names)}
    out = []
    for k, obj in enumerate(root.findall("object"), 1):
        where = f"{source}: object {k}: "
        name_el = obj.find("name")
        name = name_el.text.strip() if name_el is not None and name_el.text else ""
        if name not in lookup:
            raise DataError(f"{where}unknown class name {name!r}")
        box = obj.find("bndbox")
        if box is None:
            raise DataError(f"{where}missing <bndbox>")
        x1, y1 = _num(box, "xmin", where), _num(box, "ymin", where)
        x2, y2 = _num(box, "xmax", where), _num(box, "ymax", where)
        if x2 <= x1 or y2 <= y1:
            raise DataError(f"{where}degenerate box")
        ann = Annotation(lookup[name], (x1 + x2) / 2 / width, (y1 + y2) / 2 / height,
                         (x2 - x1) / width, (y2 - y1) / height)
        ann.validate(len(class_names), where)
        out.append(ann)
    return out


def write_voc_xml(anns: list[Annotation], class_names: list[str], width: int, height: int,
                  filename: str = "image") -> str:
    """Inverse of :func:`parse_voc_xml` with integer pixel corners."""
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(width)
    ET.SubElement(size, "height").text = str(height)
    ET.SubElement(size, "depth").text = "3"
    for a in anns:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = class_names[a.cls]
        box = ET.SubElement(obj, "bndbox")
        corners = ((a.cx - a.w / 2) * width, (a.cy - a.h / 2) * height,
                   (a.cx + a.w / 2) * width, (a.cy + a.h / 2) * height)
        for tag, v in zip(("xmin", "ymin", "xmax", "ymax"), corners):
            ET.SubElement(box, tag).text = str(int(round(v)))
    return ET.tostring(root, encoding="unicode")
