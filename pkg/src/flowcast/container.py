"""Binary container for stacks of float64 matrices.

Block layout (little-endian):

    magic  "IBFP" (4 bytes)
    version u32   (currently 1)
    count   u32   number of matrices in the block
    rows    u32
    cols    u32
    data    count * rows * cols float64, row-major

A file holds one or more blocks back to back (a flow tensor or a basis set is
one block; a fitted model is a basis block followed by a coefficient block).
Each artifact has a JSON sidecar at ``<file>.meta.json`` for non-numeric
metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"IBFP"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def write_blocks(path: str | Path, blocks: list[np.ndarray]) -> None:
    """Write matrix stacks to ``path``; each block must be 3-d (count, rows, cols)."""
    with open(path, "wb") as fh:
        for block in blocks:
            arr = np.ascontiguousarray(block, dtype="<f8")
            if arr.ndim != 3:
                raise DataError(f"container blocks must be 3-d, got shape {arr.shape}")
            count, rows, cols = arr.shape
            fh.write(_HEADER.pack(MAGIC, VERSION, count, rows, cols))
            fh.write(arr.tobytes(order="C"))


def read_blocks(path: str | Path) -> list[np.ndarray]:
    raw = Path(path).read_bytes()
    blocks = []
    offset = 0
    while offset < len(raw):
        if len(raw) - offset < _HEADER.size:
            raise DataError(f"{path}: truncated block header at offset {offset}")
        magic, version, count, rows, cols = _HEADER.unpack_from(raw, offset)
        if magic != MAGIC:
            raise DataError(f"{path}: bad magic {magic!r} at offset {offset}")
        if version != VERSION:
            raise DataError(f"{path}: unsupported container version {version}")
        offset += _HEADER.size
        nbytes = count * rows * cols * 8
        if len(raw) - offset < nbytes:
            raise DataError(f"{path}: truncated block payload at offset {offset}")
        data = np.frombuffer(raw, dtype="<f8", count=count * rows * cols, offset=offset)
        blocks.append(data.reshape(count, rows, cols).copy())
        offset += nbytes
    if not blocks:
        raise DataError(f"{path}: empty container")
    return blocks


def write_matrices(path: str | Path, matrices: np.ndarray) -> None:
    write_blocks(path, [np.asarray(matrices)])


def read_matrices(path: str | Path) -> np.ndarray:
    blocks = read_blocks(path)
    if len(blocks) != 1:
        raise DataError(f"{path}: expected a single block, found {len(blocks)}")
    return blocks[0]


def meta_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".meta.json")


def write_meta(path: str | Path, meta: dict) -> None:
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_meta(path: str | Path) -> dict:
    p = meta_path(path)
    if not p.exists():
        raise DataError(f"missing metadata sidecar: {p}")
    return json.loads(p.read_text(encoding="utf-8"))
