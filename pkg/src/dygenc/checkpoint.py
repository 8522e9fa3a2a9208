"""Checkpoint container: JSON manifest + concatenated little-endian arrays.

Layout (single file)::

    bytes 0..7    magic b"DYGC0001"
    bytes 8..11   uint32 little-endian manifest length L
    bytes 12..12+L    UTF-8 JSON manifest
    remainder     raw array bytes, little-endian, in manifest order

The manifest lists every tensor with name, shape, dtype, byte offset and a
``group`` label ("base_lm", "adapter", ...) so adapters can be swapped
without touching base weights. ``meta`` carries arbitrary run information.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import SchemaError

MAGIC = b"DYGC0001"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path, arrays, groups=None, meta=None):
    """Write ``name -> ndarray`` pairs. ``groups`` maps names to group labels."""
    groups = groups or {}
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype_name = str(arr.dtype)
        if dtype_name not in _DTYPES:
            raise SchemaError(f"unsupported checkpoint dtype {dtype_name} for {name!r}")
        raw = arr.astype(_DTYPES[dtype_name]).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype_name,
                "offset": offset,
                "nbytes": len(raw),
                "group": groups.get(name, "base"),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {"version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}}
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(mbytes).to_bytes(4, "little"))
        f.write(mbytes)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path):
    """Returns (name -> ndarray, groups, meta)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise SchemaError(f"not a checkpoint file: bad magic {magic!r}")
        mlen = int.from_bytes(f.read(4), "little")
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        payload = f.read()
    if manifest.get("version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {manifest.get('version')}")
    arrays = {}
    groups = {}
    for ent in manifest["tensors"]:
        raw = payload[ent["offset"] : ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[ent["dtype"]]).reshape(ent["shape"])
        arrays[ent["name"]] = arr.astype(ent["dtype"]).copy()
        groups[ent["name"]] = ent["group"]
    return arrays, groups, manifest.get("meta", {})
