"""Single-file parameter checkpoints.

Layout::

    b"SCOPECKPT"  magic (9 bytes)
    uint16 LE     format version
    uint32 LE     manifest length in bytes
    manifest      UTF-8 JSON: {"entries": [{"name", "shape", "dtype", "offset"}], "meta": {...}}
    payload       little-endian raw values, offsets relative to payload start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"SCOPECKPT"
VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"entries": entries, "meta": dict(meta or {})}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic header")
    pos = len(MAGIC)
    version, mlen = struct.unpack_from("<HI", blob, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<HI")
    manifest = json.loads(blob[pos : pos + mlen].decode())
    payload = memoryview(blob)[pos + mlen :]
    arrays = {}
    for e in manifest["entries"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + count * dt.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {e['name']!r}")
        arr = np.frombuffer(payload[e["offset"] : end], dtype=dt).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(e["dtype"])
    return arrays, manifest.get("meta", {})
