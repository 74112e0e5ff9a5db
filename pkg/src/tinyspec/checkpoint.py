"""Checkpoint files: one JSON header, then raw tensor bytes.

Layout: a little-endian uint32 header length, the UTF-8 JSON header, then
each tensor's raw little-endian float32 bytes concatenated in header order.
Writes go to a temp file in the same directory and are renamed into place,
so a crash can never leave a half-written checkpoint at the target path.
Round trips are bit-identical.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerWeights

FORMAT_VERSION = 1
_LEN = struct.Struct("<I")


def save_checkpoint(path: str | Path, weights: TransformerWeights, meta: dict | None = None) -> None:
    """Write weights (and optional JSON-serializable metadata) atomically."""
    path = Path(path)
    items = weights.state_items()
    header = {
        "format_version": FORMAT_VERSION,
        "model": dataclasses.asdict(weights.cfg),
        "meta": meta or {},
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in items],
    }
    blob = json.dumps(header, ensure_ascii=False).encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_LEN.pack(len(blob)))
            fh.write(blob)
            for _, arr in items:
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> tuple[TransformerWeights, dict]:
    """Read a checkpoint back; returns (weights, meta)."""
    raw = Path(path).read_bytes()
    if len(raw) < _LEN.size:
        raise ValueError(f"{path}: not a checkpoint (too short)")
    (hlen,) = _LEN.unpack_from(raw)
    if len(raw) < _LEN.size + hlen:
        raise ValueError(f"{path}: truncated header")
    header = json.loads(raw[_LEN.size : _LEN.size + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {header.get('format_version')}")
    cfg = ModelConfig(**header["model"])
    tensors: dict[str, np.ndarray] = {}
    offset = _LEN.size + hlen
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"{path}: truncated tensor data at {spec['name']}")
        tensors[spec["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after tensor data")
    weights = TransformerWeights(cfg, tensors)
    expected = {name for name, _ in weights.state_items()}
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        raise ValueError(f"{path}: tensor set mismatch (missing {missing[:3]}...)")
    return weights, header.get("meta", {})
