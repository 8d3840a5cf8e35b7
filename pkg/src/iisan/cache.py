"""Persistent store of frozen-backbone hidden states.

File layout (little-endian)::

    4s   magic "DPHS"
    u32  version
    32s  SHA-256 digest of the (text, image) encoder configs
    u32  L, d, count
    count x (u32 item_id, u32 modality, u64 byte offset into payload)
    payload: count x (L+1) x d values

The value width (8 or 4 bytes) is implied by the payload length. Records are
written in item order, text before image.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .backbone import EncoderConfig, HiddenStack, config_digest
from .errors import CacheError, CacheMissError, ConfigDriftError

MAGIC = b"DPHS"
VERSION = 1
HEADER = struct.Struct("<4sI32s3I")
INDEX = struct.Struct("<IIQ")
MODALITY_CODE = {"text": 0, "image": 1}
_DTYPES = {8: "<f8", 4: "<f4"}


def cache_digest(text_cfg: EncoderConfig, image_cfg: EncoderConfig) -> bytes:
    return config_digest(text_cfg, image_cfg)


def build_cache(encoders, items, item_ids, path, width: int = 8, chunk: int = 256) -> int:
    """Encode every item through both frozen encoders and write the store.

    Returns the file size in bytes.
    """
    if width not in _DTYPES:
        raise CacheError(f"unsupported storage width {width}; use 8 or 4")
    ids = [int(i) for i in item_ids]
    if len(set(ids)) != len(ids):
        raise CacheError("duplicate item ids in cache build")
    text, image = encoders["text"], encoders["image"]
    L, d = text.config.layers, text.config.hidden_dim
    if (image.config.layers, image.config.hidden_dim) != (L, d):
        raise CacheError("text and image encoders must share layers and hidden_dim")
    encoded = {}
    arr = np.asarray(ids, dtype=np.int64)
    for mod, enc in (("text", text), ("image", image)):
        parts = [enc.encode_batch(items.raw(arr[lo:lo + chunk], mod))
                 for lo in range(0, len(arr), chunk)]
        encoded[mod] = np.concatenate(parts) if parts else np.zeros((0, L + 1, d))
    record = (L + 1) * d * width
    header = HEADER.pack(MAGIC, VERSION, cache_digest(text.config, image.config), L, d, 2 * len(ids))
    index, payload = [], []
    for r, item in enumerate(ids):
        for mod in ("text", "image"):
            index.append(INDEX.pack(item, MODALITY_CODE[mod], len(payload) * record))
            payload.append(encoded[mod][r].astype(_DTYPES[width]).tobytes())
    blob = header + b"".join(index) + b"".join(payload)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise CacheError(f"cannot write cache {path}: {exc}") from None
    return len(blob)


class CacheStore:
    """Read-only view over a cache file, fully loaded into memory."""

    def __init__(self, path, text_cfg: EncoderConfig, image_cfg: EncoderConfig):
        try:
            buf = Path(path).read_bytes()
        except OSError as exc:
            raise CacheError(f"cannot read cache {path}: {exc}") from None
        if len(buf) < HEADER.size:
            raise CacheError("cache file truncated")
        magic, version, digest, L, d, count = HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise CacheError(f"not a hidden-state cache (magic {magic!r})")
        if version != VERSION:
            raise CacheError(f"unsupported cache version {version}")
        if digest != cache_digest(text_cfg, image_cfg):
            raise ConfigDriftError("cache was built with a different encoder configuration")
        self.path = Path(path)
        self.layers, self.dim, self.count = L, d, count
        base = HEADER.size + count * INDEX.size
        payload = len(buf) - base
        per = count * (L + 1) * d
        if count == 0:
            self.width = 8
        elif payload % per or payload // per not in _DTYPES:
            raise CacheError("cache payload size does not match its header")
        else:
            self.width = payload // per
        values = np.frombuffer(buf, _DTYPES[self.width], per, base)
        self._values = values.astype(np.float64).reshape(count, L + 1, d)
        self._row: dict[tuple[int, int], int] = {}
        record = (L + 1) * d * self.width
        for r in range(count):
            item, mod, offset = INDEX.unpack_from(buf, HEADER.size + r * INDEX.size)
            self._row[(item, mod)] = offset // record

    def __len__(self):
        return self.count

    def __contains__(self, key):
        item, modality = key
        return (int(item), MODALITY_CODE[modality]) in self._row

    def get(self, item_id: int, modality: str) -> HiddenStack:
        return HiddenStack(self.stacks([item_id], modality)[0])

    def stacks(self, ids, modality: str) -> np.ndarray:
        """(N, L+1, d) float64 states for the given items."""
        code = MODALITY_CODE[modality]
        rows = []
        for i in np.asarray(ids).reshape(-1):
            r = self._row.get((int(i), code))
            if r is None:
                raise CacheMissError(f"no cached {modality} states for item {int(i)}")
            rows.append(r)
        return self._values[rows]


def open_cache(path, text_cfg: EncoderConfig, image_cfg: EncoderConfig) -> CacheStore:
    return CacheStore(path, text_cfg, image_cfg)


def expected_size(num_items: int, layers: int, dim: int, width: int = 8) -> int:
    count = 2 * num_items
    return HEADER.size + count * INDEX.size + count * (layers + 1) * dim * width
