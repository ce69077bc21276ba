"""Parameter checkpoint container.

Byte layout of a checkpoint file:

    bytes 0..7    magic b"SIC4CKPT"
    bytes 8..11   little-endian uint32: manifest length M in bytes
    bytes 12..12+M  manifest, UTF-8 JSON
    then, back to back in manifest order, one tensor blob per entry in the
    rank-4 tensor binary format (16-byte dims header + little-endian values).

The manifest is {"format": 1, "model": ..., "entries": [...]} where each
entry records {"path", "shape", "dtype", "offset", "nbytes"}; offsets are
relative to the end of the manifest. Arrays of rank < 4 are stored with
leading singleton dims; the manifest keeps the true shape.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .tensor import Tensor4

MAGIC = b"SIC4CKPT"


def _as_rank4(arr: np.ndarray) -> np.ndarray:
    if arr.ndim > 4:
        raise ValueError(f"cannot store rank-{arr.ndim} array")
    return arr.reshape((1,) * (4 - arr.ndim) + arr.shape)


def save_checkpoint(path, network, extra: dict | None = None) -> None:
    """Write all network state (parameters and running statistics) atomically:
    the file is fully written to a sibling temp path, then renamed over."""
    state = network.state_dict()
    blobs = []
    entries = []
    offset = 0
    for key in sorted(state):
        arr = state[key]
        blob = Tensor4(_as_rank4(arr.astype(arr.dtype, copy=False))).tobytes()
        entries.append(
            {
                "path": key,
                "shape": list(arr.shape),
                "dtype": "single" if arr.dtype == np.float32 else "double",
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": 1,
        "model": network.name,
        "num_classes": network.num_classes,
        "precision": network.precision,
        "entries": entries,
    }
    if extra:
        manifest["extra"] = extra
    mbytes = json.dumps(manifest).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(len(mbytes).to_bytes(4, "little"))
        f.write(mbytes)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def read_manifest(path) -> dict:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        mlen = int.from_bytes(f.read(4), "little")
        return json.loads(f.read(mlen).decode("utf-8"))


def load_checkpoint(path, network) -> dict:
    """Restore network state from a checkpoint; returns the manifest."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    mlen = int.from_bytes(raw[8:12], "little")
    manifest = json.loads(raw[12 : 12 + mlen].decode("utf-8"))
    base = 12 + mlen
    entries = {}
    for e in manifest["entries"]:
        blob = raw[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        t = Tensor4.frombytes(blob)
        entries[e["path"]] = t.data.reshape(e["shape"])
    network.load_state(entries)
    return manifest
