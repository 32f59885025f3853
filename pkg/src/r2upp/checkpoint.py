"""Checkpoint files.

Layout::

    b"R2UPP1\\0"                  7-byte magic
    <u64 little-endian>           length of the JSON header in bytes
    <JSON header, UTF-8>          {"architecture": {...}, "tensors": [...], "extra": {...}}
    <payload>                     little-endian float32 arrays in table order

Each ``tensors`` entry holds ``name``, ``kind`` (param | buffer), ``shape``
and ``offset``/``nbytes`` relative to the start of the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import CheckpointError
from .graph import ArchitectureConfig, NestedUNet

MAGIC = b"R2UPP1\0"
_LE_F32 = np.dtype("<f4")


def encode_checkpoint(model: NestedUNet, extra: Mapping[str, Any] | None = None) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr, kind in model.state():
        raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        table.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"architecture": model.config.to_dict(), "tensors": table, "extra": dict(extra or {})}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(path, model: NestedUNet, extra: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, extra))


def decode_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if not buf.startswith(MAGIC):
        raise CheckpointError("not a checkpoint: bad magic bytes")
    pos = len(MAGIC)
    if len(buf) < pos + 8:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", buf[pos : pos + 8])
    pos += 8
    try:
        header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = memoryview(buf)[pos + hlen :]
    arrays = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"truncated checkpoint payload at {entry['name']}")
        arr = np.frombuffer(payload[start : start + n], dtype=_LE_F32).astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return header, arrays


def load_checkpoint(path, expect: ArchitectureConfig | None = None) -> tuple[NestedUNet, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, header)``."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    header, arrays = decode_checkpoint(buf)
    config = ArchitectureConfig.from_dict(header["architecture"])
    if expect is not None and expect != config:
        raise CheckpointError("checkpoint architecture does not match the requested configuration")
    model = NestedUNet(config)
    expected = {name: arr.shape for name, arr, _ in model.state()}
    stored = {name: arr.shape for name, arr in arrays.items()}
    if expected != stored:
        missing = sorted(set(expected) ^ set(stored)) or sorted(k for k in expected if expected[k] != stored.get(k))
        raise CheckpointError(f"checkpoint tensors do not match the architecture: {missing[:5]}")
    model.load_state(arrays)
    return model, header
