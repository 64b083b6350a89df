"""Binary PPM (P6) reading and writing, plus a Pillow fallback for other formats."""

from __future__ import annotations

import os

import numpy as np

from ..errors import DataError


def _tokens(buf: bytes, count: int):
    """First ``count`` whitespace-separated header tokens (skipping # comments) and the data offset."""
    out, i = [], 0
    while len(out) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i:i + 1].isspace():
            i += 1
        if start == i:
            raise DataError("truncated PPM header")
        out.append(buf[start:i])
    return out, i + 1  # single whitespace byte ends the header


def decode_ppm(buf: bytes, source: str = "<ppm>") -> np.ndarray:
    try:
        (magic, w, h, maxval), offset = _tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (DataError, ValueError):
        raise DataError(f"{source}: malformed PPM header") from None
    if magic != b"P6":
        raise DataError(f"{source}: not a binary PPM (magic {magic!r})")
    if w <= 0 or h <= 0:
        raise DataError(f"{source}: zero-sized image")
    if not 0 < maxval < 256:
        raise DataError(f"{source}: only 8-bit PPM supported (maxval {maxval})")
    need = w * h * 3
    data = buf[offset:offset + need]
    if len(data) != need:
        raise DataError(f"{source}: truncated pixel data")
    img = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    if maxval != 255:
        img = (img.astype(np.uint32) * 255 // maxval).astype(np.uint8)
    return img.copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"PPM needs an HxWx3 image, got {img.shape}")
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def read_ppm(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc.strerror}") from None
    return decode_ppm(buf, str(path))


def write_ppm(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def read_image(path) -> np.ndarray:
    """HxWx3 uint8 image.  PPM is decoded natively; other formats go through Pillow."""
    if os.fspath(path).lower().endswith((".ppm", ".pnm")):
        return read_ppm(path)
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
