"""MCGA1 checkpoint container.

Layout: one line of JSON ``{"magic": "MCGA1", "tensors": [{"name", "shape"}...],
"meta": {...}}`` terminated by ``\\n``, followed by every tensor as
little-endian float64, concatenated in header order.
"""

from __future__ import annotations

import json
import logging
import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from errors import ContractError, MissingArtifactError
from tensorcore import Array

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

MAGIC = "MCGA1"
PAYLOAD_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    arrays: dict[str, Array] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, Array]:
        """Arrays under ``prefix.`` with the prefix stripped"""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.arrays.items() if k.startswith(f"{prefix}.")}


def encode(arrays: Mapping[str, Array], meta: Mapping[str, Any] | None = None) -> bytes:
    header = {
        "magic": MAGIC,
        "tensors": [{"name": name, "shape": list(np.shape(a))} for name, a in arrays.items()],
        "meta": dict(meta or {}),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    payload = b"".join(np.ascontiguousarray(a, dtype=PAYLOAD_DTYPE).tobytes() for a in arrays.values())
    return head + payload


def decode(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    newline = blob.find(b"\n")
    if newline < 0:
        raise ContractError(f"{source}: no checkpoint header line")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContractError(f"{source}: unreadable checkpoint header: {e}") from e
    if header.get("magic") != MAGIC:
        raise ContractError(f"{source}: bad magic {header.get('magic')!r}, expected {MAGIC}")

    payload = memoryview(blob)[newline + 1 :]
    arrays: dict[str, Array] = {}
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * PAYLOAD_DTYPE.itemsize
        if offset + nbytes > len(payload):
            raise ContractError(f"{source}: payload truncated at tensor {entry['name']}")
        flat = np.frombuffer(payload[offset : offset + nbytes], dtype=PAYLOAD_DTYPE)
        arrays[entry["name"]] = flat.astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise ContractError(f"{source}: {len(payload) - offset} trailing payload bytes")
    return Checkpoint(arrays, header.get("meta", {}))


def write_checkpoint(path: str | Path, arrays: Mapping[str, Array], meta: Mapping[str, Any] | None = None) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    staging = target.with_name(target.name + ".tmp")
    staging.write_bytes(encode(arrays, meta))
    os.replace(staging, target)
    logger.debug("wrote checkpoint %s (%d tensors)", target, len(arrays))
    return target


def read_checkpoint(path: str | Path) -> Checkpoint:
    source = Path(path)
    if not source.is_file():
        raise MissingArtifactError([str(source)], "checkpoint")
    return decode(source.read_bytes(), str(source))
