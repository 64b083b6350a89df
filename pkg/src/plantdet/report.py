"""Evaluation reports: aligned text, JSON and per-class CSV.

JSON report fields (``REPORT_SCHEMA`` is the machine-checkable form):

* ``num_images`` images scored; ``map50`` macro mean AP at IoU 0.5 over
  classes with ground truth
* ``precision`` / ``recall``: macro means at ``conf_threshold``, the
  confidence that maximises pooled F1; ``pooled_precision`` /
  ``pooled_recall`` are the micro values at the same threshold
* ``classes``: one object per class with ``id``, ``name``, ``ap50``
  (null when the class has no ground truth), ``precision``, ``recall``,
  ``n_gt`` and ``size`` (small/medium/large at 640x640, null without GT)
* ``meta``: free-form run information (checkpoint, split, config)
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .metrics import EvalResult

_num = {"type": "number"}
_ratio = {"type": "number", "minimum": 0, "maximum": 1}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["num_images", "map50", "precision", "recall", "pooled_precision", "pooled_recall",
                 "conf_threshold", "classes"],
    "properties": {
        "num_images": {"type": "integer", "minimum": 0},
        "map50": _ratio,
        "precision": _ratio,
        "recall": _ratio,
        "pooled_precision": _ratio,
        "pooled_recall": _ratio,
        "conf_threshold": _num,
        "classes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "name", "ap50", "precision", "recall", "n_gt", "size"],
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "name": {"type": "string"},
                    "ap50": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "precision": _ratio,
                    "recall": _ratio,
                    "n_gt": {"type": "integer", "minimum": 0},
                    "size": {"enum": ["small", "medium", "large", None]},
                },
                "additionalProperties": False,
            },
        },
        "meta": {"type": "object"},
    },
    "additionalProperties": False,
}


def _pct(v) -> str:
    return "    -" if v is None else f"{100 * v:5.1f}"


def format_report(result: EvalResult, title: str = "") -> str:
    """Per-class table then the aggregate line; numbers in percent."""
    width = max([len("class")] + [len(n) for n in result.class_names])
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'class':<{width}}  {'size':<6}  {'gt':>5}  {'P':>5}  {'R':>5}  {'AP50':>5}")
    for c, name in enumerate(result.class_names):
        lines.append(f"{name:<{width}}  {result.size_tags[c] or '-':<6}  {result.n_gt[c]:>5d}  "
                     f"{_pct(result.precision[c])}  {_pct(result.recall[c])}  {_pct(result.ap[c])}")
    lines.append(f"{'all':<{width}}  {'':<6}  {sum(result.n_gt):>5d}  {_pct(result.mean_precision)}  "
                 f"{_pct(result.mean_recall)}  {_pct(result.map50)}")
    lines.append(f"images {result.num_images}, P/R at confidence {result.conf_threshold:.4f}")
    return "\n".join(lines) + "\n"


def report_dict(result: EvalResult, meta: dict | None = None) -> dict:
    d = result.to_dict()
    if meta is not None:
        d["meta"] = meta
    return d


def write_reports(result: EvalResult, out_dir, stem: str = "eval", meta: dict | None = None,
                  title: str = "") -> dict[str, Path]:
    """Write ``<stem>.txt``, ``<stem>.json`` and ``<stem>_classes.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"text": out / f"{stem}.txt", "json": out / f"{stem}.json", "csv": out / f"{stem}_classes.csv"}
    paths["text"].write_text(format_report(result, title), encoding="utf-8")
    with open(paths["json"], "w", encoding="utf-8") as fh:
        json.dump(report_dict(result, meta), fh, indent=2)
        fh.write("\n")
    with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "name", "size", "n_gt", "precision", "recall", "ap50"])
        for c, name in enumerate(result.class_names):
            ap = result.ap[c]
            w.writerow([c, name, result.size_tags[c] or "", result.n_gt[c], f"{result.precision[c]:.6f}",
                        f"{result.recall[c]:.6f}", "" if ap is None else f"{ap:.6f}"])
    return paths


def validate_report(d: dict) -> None:
    """Check ``d`` against ``REPORT_SCHEMA``; raises ``ValueError`` listing the first problem.

    A small structural checker so the package needs no schema library at runtime.
    """
    _check(d, REPORT_SCHEMA, "$")


_TYPES = {"object": dict, "array": list, "string": str, "null": type(None)}


def _is(value, kind: str) -> bool:
    if kind == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, _TYPES[kind])


def _check(value, schema: dict, path: str) -> None:
    kinds = schema.get("type")
    if kinds is not None:
        kinds = [kinds] if isinstance(kinds, str) else kinds
        if not any(_is(value, k) for k in kinds):
            raise ValueError(f"{path}: expected {'/'.join(kinds)}, got {type(value).__name__}")
    if "enum" in schema and value not in schema["enum"]:
        raise ValueError(f"{path}: {value!r} not in {schema['enum']}")
    if _is(value, "number"):
        if "minimum" in schema and value < schema["minimum"]:
            raise ValueError(f"{path}: {value} < {schema['minimum']}")
        if "maximum" in schema and value > schema["maximum"]:
            raise ValueError(f"{path}: {value} > {schema['maximum']}")
    if isinstance(value, dict):
        for key in schema.get("required", ()):
            if key not in value:
                raise ValueError(f"{path}: missing {key!r}")
        props = schema.get("properties", {})
        for key, v in value.items():
            if key in props:
                _check(v, props[key], f"{path}.{key}")
            elif schema.get("additionalProperties") is False:
                raise ValueError(f"{path}: unexpected key {key!r}")
    if isinstance(value, list) and "items" in schema:
        for i, v in enumerate(value):
            _check(v, schema["items"], f"{path}[{i}]")
