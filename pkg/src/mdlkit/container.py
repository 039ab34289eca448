"""Flat binary weight container with a JSON manifest.

The binary file is the concatenation of little-endian float arrays; the
manifest (``<path>.json``) lists name, shape, dtype, and byte offset of each.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_container(path, arrays: Mapping[str, np.ndarray], extra: dict | None = None) -> Path:
    path = Path(path)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dtype = "float64" if arr.dtype == np.float64 else "float32"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    path.write_bytes(b"".join(chunks))
    manifest = {"format": "mdlkit-weights/1", "byte_order": "little", "tensors": entries}
    if extra:
        manifest.update(extra)
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(manifest_path(path).read_text(encoding="utf-8"))
    blob = path.read_bytes()
    out = {}
    for entry in manifest["tensors"]:
        try:
            dtype = np.dtype(_DTYPES[entry["dtype"]])
        except KeyError:
            raise ValueError(f"tensor {entry.get('name')!r}: unsupported dtype {entry.get('dtype')!r}") from None
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise ValueError(f"tensor {entry['name']!r}: container truncated")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(entry["shape"])
        out[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    return out, manifest
