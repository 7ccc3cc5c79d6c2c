"""Tensor container files: JSON header followed by a raw float64 blob.

Byte layout::

    offset 0   8 bytes   magic b"CCILF64\\0"
    offset 8   8 bytes   header length H, unsigned little-endian
    offset 16  H bytes   UTF-8 JSON header (sorted keys, no whitespace)
    offset 16+H          concatenated little-endian f64 arrays, row-major,
                         in the order listed by header["tensors"]

Each ``header["tensors"]`` entry is ``{"name", "shape", "offset"}`` with the
offset counted in bytes from the start of the blob. Files are written
deterministically so identical contents produce identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"CCILF64\0"


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_tensor_file(path: str | os.PathLike, meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = dict(meta)
    header["tensors"] = entries
    hbytes = dumps_json(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def read_tensor_file(path: str | os.PathLike) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a tensor file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    blob = memoryview(raw)[16 + hlen :]
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 8 * count > len(blob):
            raise ValueError(f"{path}: truncated tensor {entry['name']!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return header, arrays
