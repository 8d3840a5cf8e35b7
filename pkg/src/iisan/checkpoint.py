"""Binary checkpoints of named float64 tensors.

Layout (little-endian)::

    4s   magic "IICK"
    u32  version
    32s  config digest
    u32  tensor count
    per tensor, in declaration order:
        u16 name length, utf-8 name, u8 ndim, u32 dims[ndim], f64 values
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

MAGIC = b"IICK"
VERSION = 1
_HEADER = struct.Struct("<4sI32sI")


def to_bytes(params: dict, digest: bytes) -> bytes:
    if len(digest) != 32:
        raise ConfigError("checkpoint digest must be 32 bytes")
    parts = [_HEADER.pack(MAGIC, VERSION, digest, len(params))]
    for name, t in params.items():
        raw = name.encode()
        data = np.asarray(getattr(t, "data", t), dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{data.ndim}I", data.ndim, *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> tuple[bytes, dict[str, np.ndarray]]:
    try:
        magic, version, digest, count = _HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise DataError(f"not a checkpoint (magic {magic!r})")
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        off = _HEADER.size
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2:off + 2 + n].decode()
            off += 2 + n
            (ndim,) = struct.unpack_from("<B", buf, off)
            shape = struct.unpack_from(f"<{ndim}I", buf, off + 1)
            off += 1 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(buf, "<f8", size, off).reshape(shape).astype(np.float64)
            off += 8 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"checkpoint truncated or corrupt: {exc}") from None
    if off != len(buf):
        raise DataError("trailing bytes in checkpoint")
    return digest, out


def save(path, params: dict, digest: bytes) -> int:
    blob = to_bytes(params, digest)
    Path(path).write_bytes(blob)
    return len(blob)


def load(path) -> tuple[bytes, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())


def restore(params: dict, arrays: dict[str, np.ndarray], strict: bool = True):
    """Copy saved arrays into the matching Tensors by name."""
    missing = [k for k in params if k not in arrays]
    if strict and (missing or set(arrays) - set(params)):
        extra = sorted(set(arrays) - set(params))
        raise ConfigError(f"checkpoint does not match model: missing {missing[:3]}, extra {extra[:3]}")
    for name, t in params.items():
        if name not in arrays:
            continue
        if arrays[name].shape != t.shape:
            raise ConfigError(f"checkpoint tensor {name}: shape {arrays[name].shape} != {t.shape}")
        t.data = arrays[name].astype(t.data.dtype)
