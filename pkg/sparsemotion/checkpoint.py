"""Checkpoint directories: ``weights.bin`` plus ``manifest.json``.

``weights.bin`` is the little-endian concatenation of every named array.
The manifest lists ``name``, ``shape``, ``dtype`` and byte ``offset`` per
array, followed by free-form metadata (config, stage, step, RNG state).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from sparsemotion.errors import CheckpointError

logger = logging.getLogger(__name__)

WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "manifest.json"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under ``prefix`` with the prefix stripped (``model/``, ``optim/``)."""
        cut = len(prefix)
        return {k[cut:]: v for k, v in self.arrays.items() if k.startswith(prefix)}


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    tmp_weights = path / f"{WEIGHTS_FILE}.tmp"
    with open(tmp_weights, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = little.tobytes()
            fh.write(raw)
            entries.append(
                {
                    "name": name,
                    "shape": list(arr.shape),
                    "dtype": arr.dtype.name,
                    "offset": offset,
                    "nbytes": len(raw),
                }
            )
            offset += len(raw)
    manifest = {"version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}}
    tmp_manifest = path / f"{MANIFEST_FILE}.tmp"
    tmp_manifest.write_text(json.dumps(manifest, indent=2, sort_keys=False))
    os.replace(tmp_weights, path / WEIGHTS_FILE)
    os.replace(tmp_manifest, path / MANIFEST_FILE)
    logger.info("Saved checkpoint %s (%d arrays, %d bytes)", path, len(entries), offset)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest_path = path / MANIFEST_FILE
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {manifest.get('version')}", ["version"]
        )
    raw = (path / WEIGHTS_FILE).read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + count * dtype.itemsize
        if end > len(raw):
            raise CheckpointError(f"weights file truncated at array '{entry['name']}'")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True).reshape(entry["shape"])
    logger.info("Loaded checkpoint %s (%d arrays)", path, len(arrays))
    return Checkpoint(arrays=arrays, meta=manifest.get("meta", {}))


def diff_config(expected: dict[str, Any], found: dict[str, Any], keys: list[str] | None = None) -> list[str]:
    """Keys whose values differ between two config dicts."""
    names = keys if keys is not None else sorted(set(expected) | set(found))
    return [k for k in names if expected.get(k) != found.get(k)]
