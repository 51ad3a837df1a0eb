"""Single-file tensor container: length-prefixed JSON manifest, then raw little-endian data.

Layout::

    b"ECLSEQ1\\0"                       8-byte magic
    uint64 little-endian                 manifest length in bytes
    manifest (UTF-8 JSON, sorted keys)  {"meta": ..., "tensors": {name: {shape, dtype, offset, nbytes}}}
    payload                             tensors back to back, offsets relative to payload start

Only ``<f8`` and ``<i8`` are written. Files are byte-identical for identical inputs.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"ECLSEQ1\0"
_DTYPES = {"float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


def write_blob(path, arrays, meta=None):
    manifest = {"meta": meta or {}, "tensors": {}}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.kind == "f":
            kind = "float64"
        elif arr.dtype.kind in "iub":
            kind = "int64"
        else:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        manifest["tensors"][name] = {
            "shape": list(arr.shape), "dtype": kind, "offset": offset, "nbytes": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def read_blob(path):
    """Return ``(arrays, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an eclseq container")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16:16 + hlen])
    base = 16 + hlen
    arrays = {}
    for name, info in manifest["tensors"].items():
        start = base + info["offset"]
        raw = blob[start:start + info["nbytes"]]
        if len(raw) != info["nbytes"]:
            raise CheckpointError(f"{path}: truncated data for {name}")
        arrays[name] = np.frombuffer(raw, dtype=_DTYPES[info["dtype"]]).reshape(info["shape"]).copy()
    return arrays, manifest["meta"]


def save_tensors(path, tensors, meta=None):
    """Write a name -> Tensor mapping. Aliased tensors are stored once, under the first name."""
    seen = {}
    arrays = {}
    aliases = {}
    for name in sorted(tensors):
        t = tensors[name]
        if id(t) in seen:
            aliases[name] = seen[id(t)]
            continue
        seen[id(t)] = name
        arrays[name] = t.data
    meta = dict(meta or {})
    if aliases:
        meta["aliases"] = aliases
    write_blob(path, arrays, meta)


def load_into(path, tensors):
    """Copy stored values into an existing name -> Tensor mapping, checking shapes."""
    arrays, meta = read_blob(path)
    aliases = meta.get("aliases", {})
    for name, t in tensors.items():
        key = aliases.get(name, name)
        if key not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if arrays[key].shape != t.data.shape:
            raise CheckpointError(f"{name}: stored shape {arrays[key].shape} != {t.data.shape}")
        t.data[...] = arrays[key]
    return meta
