"""Binary checkpoint files.

Layout (little-endian): ``UMA2CKPT`` magic, u32 version, u32 block count, then
per block: u16 name length, name, u8 kind (0 = float64 array, 1 = JSON),
u8 ndim, ndim x u64 dims, u64 payload bytes, payload. A trailing u32 CRC-32
covers everything before it.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"UMA2CKPT"
VERSION = 1
_KIND_F64 = 0
_KIND_JSON = 1


class CheckpointError(RuntimeError):
    pass


def _encode_block(name: str, kind: int, shape: tuple[int, ...], payload: bytes) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", kind, len(shape))
    head += b"".join(struct.pack("<Q", d) for d in shape)
    return head + struct.pack("<Q", len(payload)) + payload


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write named float64 arrays plus a JSON ``meta`` block, atomically."""
    path = Path(path)
    blocks = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        blocks.append(_encode_block(name, _KIND_F64, arr.shape, arr.tobytes()))
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        blocks.append(_encode_block("__meta__", _KIND_JSON, (), blob))
    body = MAGIC + struct.pack("<II", VERSION, len(blocks)) + b"".join(blocks)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; nothing is returned unless the whole file validates."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a UMA2 checkpoint (bad magic or truncated header)")
    version, count = struct.unpack_from("<II", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is not supported (this build reads version {VERSION})")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupted)")
    pos = len(MAGIC) + 8
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            kind, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from("<" + "Q" * ndim, data, pos)
            pos += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            payload = data[pos:pos + nbytes]
            if len(payload) != nbytes:
                raise CheckpointError(f"{path}: block {name!r} truncated")
            pos += nbytes
            if kind == _KIND_F64:
                arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
            elif kind == _KIND_JSON:
                meta = json.loads(payload.decode("utf-8"))
            else:
                raise CheckpointError(f"{path}: unknown block kind {kind}")
    except struct.error as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from exc
    if pos != len(data) - 4:
        raise CheckpointError(f"{path}: trailing bytes after last block")
    return arrays, meta
