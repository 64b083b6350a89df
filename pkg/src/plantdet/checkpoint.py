"""Checkpoint file format.

Layout (all integers little-endian)::

    b"PDET" | u32 version | u64 header_len | header JSON
    | payload (float32 LE, tensors back to back in header order)
    | u64 config_len | config JSON | u32 CRC32 of everything before it

The header maps each tensor name to ``{"shape", "offset", "length"}``
(offset/length in payload bytes).  The config JSON echoes the model
configuration so a checkpoint is self-describing.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .boxes import AnchorSet
from .errors import ConfigError, ContractError, FormatError
from .model import BackboneConfig, DetectorModel

MAGIC = b"PDET"
VERSION = 1
_DTYPE = np.dtype("<f4")


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(state: dict[str, np.ndarray], config: dict) -> bytes:
    header, chunks, offset = {}, [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype=_DTYPE)
        raw = arr.tobytes()
        header[name] = {"shape": list(arr.shape), "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    head = _dumps(header)
    conf = _dumps(config)
    body = b"".join([MAGIC, struct.pack("<IQ", VERSION, len(head)), head, *chunks,
                     struct.pack("<Q", len(conf)), conf])
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes, source: str = "<checkpoint>") -> tuple[dict, dict]:
    """Validate and split a checkpoint into ``(state, config)``."""
    def fail(msg):
        raise FormatError(f"{source}: {msg}")

    if len(buf) < 4 + 12 + 8 + 4:
        fail("file too short")
    if buf[:4] != MAGIC:
        fail(f"bad magic {buf[:4]!r}")
    version, head_len = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        fail(f"unsupported version {version} (expected {VERSION})")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        fail("checksum mismatch (file corrupted or truncated)")
    pos = 16
    if pos + head_len > len(body):
        fail("header extends past end of file")
    try:
        header = json.loads(body[pos:pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        fail("header is not valid JSON")
    if not isinstance(header, dict):
        fail("header is not a mapping")
    pos += head_len

    expected = 0
    spans = []
    for name in sorted(header):
        entry = header[name]
        try:
            shape = tuple(int(d) for d in entry["shape"])
            off, length = int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError):
            fail(f"header entry for {name!r} is malformed")
        if any(d < 0 for d in shape) or length != int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize:
            fail(f"{name}: length {length} does not match shape {shape}")
        if off != expected:
            fail(f"{name}: offset {off} overlaps or leaves a gap (expected {expected})")
        spans.append((name, shape, off, length))
        expected += length
    payload_end = pos + expected
    if payload_end + 8 > len(body):
        fail("payload truncated")
    state = {}
    for name, shape, off, length in spans:
        state[name] = np.frombuffer(body, dtype=_DTYPE, count=length // 4, offset=pos + off).reshape(shape).copy()
    (conf_len,) = struct.unpack_from("<Q", body, payload_end)
    conf_start = payload_end + 8
    if conf_start + conf_len != len(body):
        fail("config section length mismatch")
    try:
        config = json.loads(body[conf_start:].decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        fail("config is not valid JSON")
    return state, config


def save_checkpoint(model: DetectorModel, path, meta: dict | None = None) -> Path:
    """Write parameters, BN buffers and the model config (plus optional ``meta``)."""
    config = model.config_dict()
    meta = meta if meta is not None else getattr(model, "checkpoint_meta", None)
    if meta:
        config["meta"] = meta
    path = Path(path)
    data = encode_checkpoint(model.state_dict(), config)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def model_from_config(config: dict) -> DetectorModel:
    try:
        cfg = BackboneConfig(**config["backbone"])
        anchors = AnchorSet(tuple(tuple(a) for a in config["anchors"]))
        return DetectorModel(cfg, int(config["nc"]), anchors, int(config.get("seed", 0)),
                             list(config["class_names"]))
    except (KeyError, TypeError, ContractError) as exc:
        raise FormatError(f"checkpoint config is invalid: {exc}") from None
    except ConfigError as exc:
        raise FormatError(f"checkpoint config is invalid: {exc}") from None


def load_checkpoint(path) -> DetectorModel:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    state, config = decode_checkpoint(buf, str(path))
    model = model_from_config(config)
    try:
        model.load_state_dict(state)
    except ContractError as exc:
        raise FormatError(f"{path}: {exc}") from None
    model.checkpoint_meta = config.get("meta")
    model.eval()
    return model
