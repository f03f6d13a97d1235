"""Binary parameter checkpoints.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"MBBRCKPT"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length L in bytes
    20      L     UTF-8 JSON header
    20+L    ...   float64 little-endian payload, tensors back to back

The JSON header is ``{"meta": {...}, "tensors": [{"name", "shape", "offset",
"count"}, ...]}`` serialised with sorted keys and no whitespace; ``offset`` and
``count`` are in float64 elements relative to the start of the payload. Tensor
order is the order given when saving. Writes go to a temporary file in the
same directory which is then renamed, so a crash never leaves a partial file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError

MAGIC = b"MBBRCKPT"
VERSION = 1


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "count": int(flat.size)})
        chunks.append(flat.tobytes())
        offset += flat.size
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def decode(payload: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if payload[:8] != MAGIC:
        raise DataError("not an MBBR checkpoint (bad magic)")
    if len(payload) < 20:
        raise DataError("truncated checkpoint: incomplete preamble")
    version, hlen = struct.unpack("<IQ", payload[8:20])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(payload[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError("corrupt checkpoint header") from None
    body = payload[20 + hlen:]
    data = np.frombuffer(body[:len(body) - len(body) % 8], dtype="<f8")
    out = {}
    for e in header["tensors"]:
        flat = data[e["offset"]:e["offset"] + e["count"]]
        if flat.size != e["count"]:
            raise DataError(f"truncated checkpoint: tensor {e['name']!r}")
        out[e["name"]] = flat.astype(np.float64).reshape(e["shape"])
    return out, header["meta"]


def save(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint {str(path)!r} does not exist")
    return decode(path.read_bytes())
