"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    b"CDT1" | u32 version | u32 meta_len | meta (utf-8 JSON, sorted keys)
    | u32 count | count x entry | u64 checksum

    entry = u32 name_len | name (utf-8) | u32 rank | rank x u32 dims | float32 payload

The checksum is a 64-bit BLAKE2b digest of every byte before it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CDT1"
VERSION = 1


class ChecksumError(ValueError):
    pass


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def dumps(tensors: dict[str, torch.Tensor], meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4").copy(order="C")  # keeps rank 0
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + _digest(body)


def loads(data: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if len(data) < 20 or data[:4] != MAGIC:
        raise ValueError("not a CDT1 checkpoint")
    body, checksum = data[:-8], data[-8:]
    if _digest(body) != checksum:
        raise ChecksumError("checkpoint checksum mismatch")
    version, meta_len = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(body[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", body, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if off != len(body):
        raise ValueError("trailing bytes in checkpoint")
    return tensors, meta


def save(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    return loads(Path(path).read_bytes())


def element_count(tensors: dict[str, torch.Tensor]) -> int:
    return sum(t.numel() for t in tensors.values())
