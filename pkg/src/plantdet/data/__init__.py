"""Annotations, images, splits, synthetic scenes and in-memory datasets."""

from .labels import Annotation, format_yolo_label, parse_voc_xml, parse_yolo_label, write_voc_xml
from .imageio import read_image, read_ppm, write_ppm
from .resize import BoxTransform, resize_image
from .split import DatasetIndex, split_counts, split_dataset
from .synth import SyntheticSceneConfig, generate_synthetic_dataset
from .dataset import Dataset

__all__ = [
    "Annotation", "BoxTransform", "Dataset", "DatasetIndex", "SyntheticSceneConfig",
    "format_yolo_label", "generate_synthetic_dataset", "parse_voc_xml", "parse_yolo_label",
    "read_image", "read_ppm", "resize_image", "split_counts", "split_dataset", "write_ppm",
    "write_voc_xml",
]
