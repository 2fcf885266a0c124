"""Little-endian binary container for named float32 tensors.

Layout::

    b"MUMO" | u32 version | u32 kind | u32 n_ints | i32 * n_ints
    | 32-byte link digest | u32 n_tensors
    | per tensor: u32 name_len, name, u32 rank, u32 * rank dims, f32 data
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MUMO"
VERSION = 1
KIND_BASE = 1
KIND_HEAD = 2


class ContainerError(ValueError):
    pass


@dataclass
class Container:
    kind: int
    ints: list[int]
    tensors: dict[str, np.ndarray]
    link: bytes = b"\x00" * 32


def tensor_digest(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        h.update(name.encode())
        h.update(struct.pack("<I", arr.ndim))
        h.update(struct.pack(f"<{arr.ndim}I", *arr.shape))
        h.update(arr.tobytes())
    return h.hexdigest()


def write_container(path: str | Path, c: Container) -> None:
    if len(c.link) != 32:
        raise ContainerError("link digest must be 32 bytes")
    parts = [MAGIC, struct.pack("<III", VERSION, c.kind, len(c.ints))]
    parts.append(struct.pack(f"<{len(c.ints)}i", *c.ints))
    parts.append(c.link)
    parts.append(struct.pack("<I", len(c.tensors)))
    for name, arr in c.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_container(path: str | Path) -> Container:
    buf = Path(path).read_bytes()
    try:
        if buf[:4] != MAGIC:
            raise ContainerError(f"{path}: bad magic")
        off = 4
        version, kind, n_ints = struct.unpack_from("<III", buf, off)
        off += 12
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported version {version}")
        ints = list(struct.unpack_from(f"<{n_ints}i", buf, off))
        off += 4 * n_ints
        link = buf[off : off + 32]
        off += 32
        (n_tensors,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(n_tensors):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims)
            off += 4 * count
            tensors[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, ContainerError):
            raise
        raise ContainerError(f"{path}: truncated or corrupt tensor file ({exc})") from exc
    if off != len(buf):
        raise ContainerError(f"{path}: trailing bytes")
    return Container(kind, ints, tensors, link)
