"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"REDC"  u32 version  u32 config_len  config (UTF-8 JSON, sorted keys)
    u32 tensor_count
    per tensor: u32 name_len, name (UTF-8), u8 dtype tag, u8 rank,
                rank x u64 dims, payload (little-endian, C order)
    8-byte BLAKE2b digest of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"REDC"
VERSION = 1
DIGEST_SIZE = 8
DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
TAG_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class CheckpointError(ValueError):
    """Malformed, truncated or corrupted checkpoint."""


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=DIGEST_SIZE).digest()


def encode(tensors: dict[str, np.ndarray], config: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        a = np.asarray(tensors[name])
        if a.dtype not in TAG_OF:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {a.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BB", TAG_OF[a.dtype], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype=DTYPE_TAGS[TAG_OF[a.dtype]]).tobytes())
    body = b"".join(parts)
    return body + _digest(body)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < len(MAGIC) + DIGEST_SIZE or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if _digest(body) != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")
    r = _Reader(body)
    r.take(4)
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = json.loads(r.take(cfg_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}Q")
        dt = DTYPE_TAGS[tag]
        size = int(np.prod(dims)) * dt.itemsize
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(r.take(size), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after tensor table")
    return tensors, config


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray], config: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(tensors, config))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
