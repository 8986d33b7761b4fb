"""Self-describing binary container used for checkpoints and dataset caches.

Byte layout (all integers little-endian)::

    magic        8 bytes   b"DCLSTM\\x00\\x01"
    version      uint32
    kind         uint8 length + ASCII ("checkpoint", "dataset", ...)
    meta         uint64 length + UTF-8 JSON (sorted keys)
    n_arrays     uint32
    per array:   uint16 name length + UTF-8 name,
                 uint8 ndim, ndim x uint64 extents,
                 prod(extents) x float64
    checksum     32 bytes, SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DCLSTM\x00\x01"
VERSION = 1


class ContainerError(ValueError):
    pass


class ChecksumError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


def encode(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    k = kind.encode("ascii")
    parts.append(struct.pack("<B", len(k)) + k)
    m = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<Q", len(m)) + m)
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + 4 + 32:
        raise TruncatedError("file too short to be a container")
    if blob[:len(MAGIC)] != MAGIC:
        raise ContainerError("bad magic: not a dclstm container")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch: file is corrupted or truncated")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise TruncatedError("unexpected end of container")
        out = body[pos:pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise VersionError(f"container version {version} is not supported (expected {VERSION})")
    (klen,) = struct.unpack("<B", take(1))
    found = take(klen).decode("ascii")
    if kind is not None and found != kind:
        raise ContainerError(f"expected a {kind!r} container, found {found!r}")
    (mlen,) = struct.unpack("<Q", take(8))
    meta = json.loads(take(mlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(body):
        raise ContainerError("trailing bytes after last array")
    return meta, arrays


def write(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write atomically and return the SHA-256 hex digest of the file."""
    blob = encode(kind, meta, arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def read(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), kind)
