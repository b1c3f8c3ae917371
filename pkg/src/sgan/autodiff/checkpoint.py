"""Self-describing checkpoint container.

Layout::

    b"SGANCKPT"                 8-byte magic
    uint32 LE                   format version
    uint64 LE                   header length in bytes
    header (UTF-8 JSON)         {"format_version", "tensors": [{name, shape, offset, nbytes}], "meta"}
    payload                     concatenated little-endian float64 arrays

Offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"SGANCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "tensors": entries, "meta": dict(meta or {})},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: header version mismatch")
    payload = memoryview(blob)[start + hlen :]
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = entry["nbytes"]
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: size/shape mismatch for {entry['name']!r}")
        lo = entry["offset"]
        if lo + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(payload[lo : lo + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
    return arrays, header.get("meta", {})
