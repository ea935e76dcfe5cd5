"""Versioned binary checkpoints for :class:`ProxyModel`.

Layout: ``MAGIC`` (8 bytes), version (uint32 LE), manifest length (uint32 LE),
UTF-8 JSON manifest, then every parameter as little-endian float32 in manifest
order.  A JSON copy of the manifest is written next to the file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ProxyModel

MAGIC = b"ADVRAWPX"
VERSION = 1


class CheckpointError(ValueError):
    pass


def manifest_of(model: ProxyModel) -> dict:
    return {
        "format": "advraw-proxy",
        "version": VERSION,
        "width": model.width,
        "seed": model.seed,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in model.named_params()],
    }


def save_checkpoint(model: ProxyModel, path) -> None:
    path = Path(path)
    manifest = manifest_of(model)
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(p, dtype="<f4").tobytes() for _, p in model.named_params()]
    path.write_bytes(b"".join(parts))
    path.with_name(path.name + ".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path) -> ProxyModel:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a proxy checkpoint")
    version, size = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(data[16:16 + size].decode("utf-8"))
    model = ProxyModel(seed=manifest["seed"], width=manifest["width"])
    expected = [(n, list(p.shape)) for n, p in model.named_params()]
    found = [(e["name"], e["shape"]) for e in manifest["params"]]
    if expected != found:
        raise CheckpointError(f"{path}: layer manifest does not match the model layout")
    offset = 16 + size
    for _, param in model.named_params():
        count = param.size
        chunk = data[offset:offset + 4 * count]
        if len(chunk) != 4 * count:
            raise CheckpointError(f"{path}: truncated parameter data")
        param[...] = np.frombuffer(chunk, dtype="<f4").reshape(param.shape)
        offset += 4 * count
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after parameters")
    return model
