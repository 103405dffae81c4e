"""Weight files: one little-endian float32 blob plus a JSON manifest.

The manifest lists every tensor by name with its shape and byte offset into
the blob, in the order they were written.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_TAG = "vineseg.weights/1"
BLOB_NAME = "weights.f32"
MANIFEST_NAME = "weights.json"


def save_tensors(tensors: Mapping[str, np.ndarray], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / BLOB_NAME, "wb") as fh:
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(data.shape), "offset": offset})
            offset += data.nbytes
    manifest = {"format": FORMAT_TAG, "dtype": "float32", "byte_order": "little", "tensors": entries}
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_tensors(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported weight format {manifest.get('format')!r}")
    blob = (directory / BLOB_NAME).read_bytes()
    out = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + 4 * count > len(blob):
            raise ValueError(f"weight blob too short for tensor {entry['name']!r}")
        out[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)
    return out
