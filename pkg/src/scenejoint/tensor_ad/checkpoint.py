"""Checkpoint directories: ``manifest.json`` (ordered names/shapes) + ``params.bin`` (little-endian float32)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from scenejoint.tensor_ad.nn import ParamStore

MANIFEST = "manifest.json"
PARAMS = "params.bin"


class CheckpointError(Exception):
    pass


def save_checkpoint(directory: str | Path, store: ParamStore) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "scenejoint-params-v1", "params": [{"name": p.name, "shape": list(p.shape)} for p in store]}
    blob = b"".join(np.ascontiguousarray(p.value, dtype="<f4").tobytes() for p in store)
    (directory / PARAMS).write_bytes(blob)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def read_checkpoint(directory: str | Path) -> dict[str, np.ndarray]:
    """Load a checkpoint into an ordered ``name -> float32 array`` mapping."""
    directory = Path(directory)
    mpath, ppath = directory / MANIFEST, directory / PARAMS
    if not mpath.is_file() or not ppath.is_file():
        raise CheckpointError(f"no checkpoint at {directory} (need {MANIFEST} and {PARAMS})")
    manifest = json.loads(mpath.read_text())
    flat = np.frombuffer(ppath.read_bytes(), dtype="<f4")
    out: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        if offset + n > flat.size:
            raise CheckpointError(f"{ppath} is truncated at parameter {entry['name']!r}")
        out[entry["name"]] = flat[offset : offset + n].reshape(shape).astype(np.float32)
        offset += n
    if offset != flat.size:
        raise CheckpointError(f"{ppath} has {flat.size - offset} trailing values")
    return out


def load_into(store: ParamStore, directory: str | Path) -> None:
    values = read_checkpoint(directory)
    if list(values) != store.names():
        raise CheckpointError(f"checkpoint {directory} parameter list does not match the model")
    for p in store:
        if values[p.name].shape != p.shape:
            raise CheckpointError(f"{p.name}: checkpoint shape {values[p.name].shape} != model shape {p.shape}")
        p.value[...] = values[p.name]


def checkpoint_id(directory: str | Path) -> str:
    """Short content hash of ``params.bin``."""
    return hashlib.sha256((Path(directory) / PARAMS).read_bytes()).hexdigest()[:16]
