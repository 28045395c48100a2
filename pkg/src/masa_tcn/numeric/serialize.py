"""Named float64 array container, used for weights and feature files.

Layout (all integers little-endian)::

    magic                            8 bytes, b"MASAWTS1" for weights
    uint32 n                         byte length of the manifest
    n bytes                          UTF-8 JSON manifest
    float64 LE arrays                one per parameter, manifest order

The manifest holds ``schema_version``, a free-form ``config`` dict and a
``parameters`` list of ``{"name", "shape"}``, one per array, in registry order. Array bytes
follow in exactly that order with no separators.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MASAWTS1"
FEATURE_MAGIC = b"MASAFEA1"
SCHEMA_VERSION = 1


class WeightFileError(ValueError):
    pass


def dumps_weights(params: Mapping[str, np.ndarray], config: dict, magic: bytes = MAGIC) -> bytes:
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in params.items()]
    manifest = {"schema_version": SCHEMA_VERSION, "config": config, "parameters": entries}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = b"".join(np.asarray(v, dtype="<f8").tobytes(order="C") for v in params.values())
    return magic + struct.pack("<I", len(head)) + head + body


def loads_weights(blob: bytes, magic: bytes = MAGIC) -> tuple[dict, dict]:
    """Return ``(manifest, params)`` with params in registry order."""
    if blob[:8] != magic:
        raise WeightFileError(f"bad magic {blob[:8]!r}, expected {magic!r}")
    (n,) = struct.unpack("<I", blob[8:12])
    try:
        manifest = json.loads(blob[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightFileError(f"unreadable manifest: {e}") from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise WeightFileError(f"unsupported schema_version {manifest.get('schema_version')}")
    off = 12 + n
    params = {}
    for e in manifest["parameters"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(blob):
            raise WeightFileError(f"truncated weight file at parameter {e['name']!r}")
        params[e["name"]] = np.frombuffer(blob[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    if off != len(blob):
        raise WeightFileError(f"{len(blob) - off} trailing bytes after last parameter")
    return manifest, params


def save_weights(path, params: Mapping[str, np.ndarray], config: dict) -> None:
    Path(path).write_bytes(dumps_weights(params, config))


def load_weights(path) -> tuple[dict, dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return loads_weights(p.read_bytes())
