"""Dataset index (images, labels, class names, splits) and the seeded 8:1:1 split."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import DataError

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".ppm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp")
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class DatasetIndex:
    root: str
    images: tuple[str, ...]
    labels: tuple[str, ...]
    class_names: tuple[str, ...]
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} label files")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def nc(self) -> int:
        return len(self.class_names)

    def path(self, rel: str) -> Path:
        return Path(self.root) / rel

    def split_indices(self, name: str) -> list[int]:
        if name == "all":
            return list(range(len(self)))
        if name not in self.splits:
            raise DataError(f"dataset has no {name!r} split (have {sorted(self.splits)})")
        return list(self.splits[name])

    def to_dict(self) -> dict:
        return {
            "images": list(self.images),
            "labels": list(self.labels),
            "class_names": list(self.class_names),
            "splits": {k: list(v) for k, v in self.splits.items()},
        }

    def save(self, path=None) -> Path:
        path = Path(path) if path else Path(self.root) / MANIFEST
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, root) -> "DatasetIndex":
        """Read ``manifest.json`` if present, else scan ``images/`` and ``labels/``."""
        root = Path(root)
        if root.is_file():
            manifest, root = root, root.parent
        else:
            manifest = root / MANIFEST
        if not root.is_dir():
            raise DataError(f"dataset directory {root} does not exist")
        if manifest.is_file():
            try:
                with open(manifest, encoding="utf-8") as fh:
                    d = json.load(fh)
                idx = cls(str(root), tuple(d["images"]), tuple(d["labels"]),
                          tuple(d["class_names"]), {k: tuple(v) for k, v in d.get("splits", {}).items()})
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{manifest}: malformed manifest ({exc})") from None
            for rel in idx.images + idx.labels:
                if not (root / rel).is_file():
                    raise DataError(f"{manifest}: listed file {rel} is missing")
            return idx
        return cls.scan(root)

    @classmethod
    def scan(cls, root) -> "DatasetIndex":
        root = Path(root)
        img_dir, lbl_dir = root / "images", root / "labels"
        if not img_dir.is_dir():
            raise DataError(f"{root}: no images/ directory")
        images = sorted(p.name for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        labels = []
        for name in images:
            lbl = lbl_dir / (os.path.splitext(name)[0] + ".txt")
            if not lbl.is_file():
                raise DataError(f"image {name} has no label file {lbl}")
            labels.append(f"labels/{lbl.name}")
        names_file = root / "classes.txt"
        if not names_file.is_file():
            raise DataError(f"{root}: missing classes.txt")
        class_names = tuple(line.strip() for line in names_file.read_text(encoding="utf-8").splitlines()
                            if line.strip())
        return cls(str(root), tuple(f"images/{n}" for n in images), tuple(labels), class_names, {})


def split_counts(n: int) -> tuple[int, int, int]:
    """(train, val, test) sizes: cut points at floor(8n/10) and floor(9n/10)."""
    if n < 3:
        raise DataError(f"need at least 3 images to split, got {n}")
    a, b = 8 * n // 10, 9 * n // 10
    return a, b - a, n - b


def split_dataset(index: DatasetIndex, seed: int = 0) -> DatasetIndex:
    """Seeded shuffle then 80/10/10 partition by count."""
    n = len(index)
    n_train, n_val, _ = split_counts(n)
    perm = np.random.default_rng(seed).permutation(n)
    splits = {
        "train": tuple(sorted(int(i) for i in perm[:n_train])),
        "val": tuple(sorted(int(i) for i in perm[n_train:n_train + n_val])),
        "test": tuple(sorted(int(i) for i in perm[n_train + n_val:])),
    }
    return replace(index, splits=splits)
