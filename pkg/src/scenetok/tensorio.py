"""Tensor directory format.

A directory holds ``manifest.json`` plus one raw file per tensor. Every file is
little-endian float32, row-major. The manifest lists ``{name, dtype, shape, file}``
for each entry; extra top-level keys carry free-form metadata.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
_LE_F32 = np.dtype("<f4")


def save_tensors(directory, tensors: dict, meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype=_LE_F32)
        fname = name.replace("/", "__") + ".f32"
        arr.tofile(directory / fname)
        entries.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "file": fname})
    manifest = {"format": "tensordir", "version": 1, "entries": entries}
    if meta:
        manifest["meta"] = meta
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_manifest(directory) -> dict:
    return json.loads((Path(directory) / MANIFEST).read_text())


def load_tensors(directory) -> dict:
    directory = Path(directory)
    manifest = load_manifest(directory)
    out = {}
    for entry in manifest["entries"]:
        if entry["dtype"] != "f32":
            raise ValueError(f"unsupported dtype {entry['dtype']!r} for {entry['name']}")
        raw = np.fromfile(directory / entry["file"], dtype=_LE_F32)
        shape = tuple(entry["shape"])
        if raw.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"{entry['file']}: expected {shape}, found {raw.size} values")
        out[entry["name"]] = raw.reshape(shape).astype(np.float32)
    return out
