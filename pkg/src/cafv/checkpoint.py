"""Checkpoint directories: ``manifest.json`` plus ``weights.bin``.

``weights.bin`` holds every parameter as little-endian float64, concatenated
in manifest order.  Writes go through a temporary name and ``os.replace``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Tuple

import numpy as np

from cafv.autodiff import ParamStore

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def dumps_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def save_checkpoint(path, store: ParamStore, **manifest) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = [{"name": n, "shape": list(store[n].shape), "trainable": store.trainable[n]} for n in store]
    blob = b"".join(np.ascontiguousarray(store[n], dtype="<f8").tobytes() for n in store)
    doc = {"format_version": CHECKPOINT_VERSION, "params": entries}
    doc.update(manifest)
    _atomic_write(path / "weights.bin", blob)
    _atomic_write(path / "manifest.json", dumps_canonical(doc).encode("utf-8"))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no manifest.json") from None
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('format_version')!r}")
    return doc


def load_checkpoint(path) -> Tuple[ParamStore, dict]:
    path = Path(path)
    doc = read_manifest(path)
    blob = (path / "weights.bin").read_bytes()
    expected = sum(8 * int(np.prod(e["shape"], dtype=np.int64)) for e in doc["params"])
    if len(blob) != expected:
        raise CheckpointError(f"{path}/weights.bin: expected {expected} bytes, got {len(blob)}")
    store = ParamStore()
    pos = 0
    for e in doc["params"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, "<f8", n, pos).reshape(e["shape"]).astype(np.float64)
        store.add(e["name"], arr, e["trainable"])
        pos += 8 * n
    return store, doc
