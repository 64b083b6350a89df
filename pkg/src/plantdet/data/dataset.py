"""In-memory view of one split: resized images and transformed labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from .imageio import read_image
from .labels import annotations_to_array, read_yolo_label
from .resize import BoxTransform, resize_image
from .split import DatasetIndex


@dataclass
class Batch:
    images: np.ndarray          # [B, 3, H, W] float32 in [0, 1]
    annotations: list[np.ndarray]  # per image [n, 5] normalized in the network frame
    indices: list[int]
    sources: list[str]


class Dataset:
    def __init__(self, index: DatasetIndex, split: str = "train", img_size: int = 640,
                 mode: str = "stretch", cache: bool = True):
        self.index = index
        self.split = split
        self.items = index.split_indices(split)
        if not self.items:
            raise DataError(f"split {split!r} of {index.root} is empty")
        self.img_size = img_size
        self.mode = mode
        self.cache = cache
        self._cache: dict[int, tuple] = {}

    def __len__(self) -> int:
        return len(self.items)

    @property
    def class_names(self) -> list[str]:
        return list(self.index.class_names)

    def source(self, k: int) -> str:
        return self.index.images[self.items[k]]

    def load(self, k: int) -> tuple[np.ndarray, np.ndarray, BoxTransform]:
        """(CHW float32 image, [n, 5] annotations, transform) of the k-th split item."""
        if k in self._cache:
            return self._cache[k]
        i = self.items[k]
        img = read_image(self.index.path(self.index.images[i]))
        anns = read_yolo_label(self.index.path(self.index.labels[i]), self.index.nc)
        resized, tf = resize_image(img, self.img_size, self.mode)
        arr = tf.forward_normalized(annotations_to_array(anns))
        arr[:, 1:] = np.clip(arr[:, 1:], 0.0, 1.0)
        x = (resized.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()
        out = (x, arr, tf)
        if self.cache:
            self._cache[k] = out
        return out

    def batches(self, batch_size: int, shuffle: bool = False, rng: np.random.Generator | None = None):
        order = np.arange(len(self))
        if shuffle:
            if rng is None:
                raise ValueError("shuffle needs an rng")
            order = rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            ks = [int(k) for k in order[start:start + batch_size]]
            loaded = [self.load(k) for k in ks]
            yield Batch(np.stack([x for x, _, _ in loaded]), [a for _, a, _ in loaded], ks,
                        [self.source(k) for k in ks])
