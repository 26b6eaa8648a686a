"""Checkpoint files: JSON manifest + flat little-endian float64 blob.

``<stem>.json``::

    {"format": "concat-lab-checkpoint", "version": 1,
     "blob": "<stem>.bin", "dtype": "<f8",
     "entries": [{"name": ..., "shape": [...], "offset": <bytes>, "count": <values>}, ...],
     "meta": {...}}

``<stem>.bin`` holds the entries back to back in manifest order, row-major.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "concat-lab-checkpoint"
VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``arrays`` (in insertion order) and return the manifest path."""
    path = Path(path)
    stem = path.with_suffix("")
    manifest_path, blob_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    blob_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    manifest = {"format": FORMAT, "version": VERSION, "blob": blob_path.name, "dtype": "<f8",
                "entries": entries, "meta": meta or {}}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path = Path(path).with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path} is not a checkpoint manifest")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    arrays = {}
    for entry in manifest["entries"]:
        start = entry["offset"]
        stop = start + 8 * entry["count"]
        if stop > len(blob):
            raise ValueError(f"{entry['name']}: blob truncated ({len(blob)} bytes)")
        arr = np.frombuffer(blob[start:stop], dtype="<f8").astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return arrays, manifest.get("meta", {})
