"""Flat binary array container: magic, header length, JSON header, raw float64 data.

Layout::

    b"MAPOARR1"                      8 bytes
    header length                    uint64, little endian
    header                           UTF-8 JSON; "arrays" lists name/shape/offset
    payload                          float64 little endian, arrays back to back
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MAPOARR1"


class CorruptCheckpointError(ValueError):
    pass


def pack_arrays(arrays: dict[str, np.ndarray], header: dict | None = None) -> bytes:
    meta = dict(header or {})
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size
    meta["arrays"] = entries
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def unpack_arrays(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 16 or data[:8] != MAGIC:
        raise CorruptCheckpointError("bad magic")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CorruptCheckpointError("truncated header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from exc
    if (len(data) - 16 - hlen) % 8:
        raise CorruptCheckpointError("payload is not a whole number of float64 values")
    payload = np.frombuffer(data, dtype="<f8", offset=16 + hlen) if len(data) > 16 + hlen \
        else np.zeros(0)
    arrays = {}
    for e in header.get("arrays", []):
        size = int(np.prod(e["shape"], dtype=np.int64))
        start = e["offset"]
        if start + size > payload.size:
            raise CorruptCheckpointError(f"array {e['name']!r} runs past end of file")
        arrays[e["name"]] = payload[start:start + size].reshape(e["shape"]).astype(np.float64)
    return header, arrays


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], header: dict | None = None) -> None:
    Path(path).write_bytes(pack_arrays(arrays, header))


def load_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return unpack_arrays(Path(path).read_bytes())
