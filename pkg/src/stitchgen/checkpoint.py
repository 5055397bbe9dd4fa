"""Tensor-table checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"STCH"
    version u16      currently 1
    count   u32      number of entries
    entry   u16 name length, UTF-8 name bytes,
            u8 rank, rank * u32 dims,
            prod(dims) * f64 payload (little-endian)

The spec fixes magic, version width and the per-entry encoding; the u32
entry count after the version is this implementation's framing choice.
Readers reject unknown versions and report the byte offset on truncation.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_MAGIC = b"STCH"


class CheckpointError(Exception):
    pass


def write_tensors(path, table: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays; insertion order is preserved."""
    parts = [_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(table))]
    for name, arr in table.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"entry rank {arr.ndim} exceeds format limit")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes for {what} at offset {off}")
        chunk = raw[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != _MAGIC:
        raise CheckpointError(f"bad magic in {path}; not a tensor-table checkpoint")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (reader supports {FORMAT_VERSION})")
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(8 * n, f"payload of {name!r}")
        table[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if off != len(raw):
        raise CheckpointError(f"trailing bytes after table at offset {off}")
    return table


def write_sidecar(path, meta: dict) -> None:
    """Deterministic JSON sidecar next to a checkpoint (same stem, .json)."""
    Path(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def read_sidecar(path) -> dict:
    return json.loads(Path(path).read_text())


def sidecar_path(ckpt_path) -> Path:
    return Path(ckpt_path).with_suffix(".json")
