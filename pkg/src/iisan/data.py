"""Synthetic multimodal sequential-recommendation data.

Items belong to latent clusters that shape both modalities: a cluster owns a
band of the token vocabulary and a patch centroid. Each user prefers one
cluster and draws most interactions from it, weighted by a within-cluster
Zipf popularity, so a content-aware recommender can beat a popularity
ranker.

Binary layout (little-endian), magic ``IISD``::

    u32 version, num_items, num_users, text_len, vocab, patch_len, patch_dim, clusters
    i32 tokens[num_items + 1, text_len]         row 0 is the null item
    f64 patches[num_items + 1, patch_len, patch_dim]
    i32 cluster[num_items + 1]
    per user: u32 user_id, u32 length, u32 items[length]
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

MAGIC = b"IISD"
VERSION = 1
_HEADER = struct.Struct("<4s8I")


@dataclass(frozen=True)
class GenSpec:
    num_users: int = 1000
    num_items: int = 500
    seed: int = 7
    num_latent_clusters: int = 4
    vocab: int = 256
    text_len: int = 8
    patch_len: int = 10
    patch_dim: int = 16
    min_len: int = 3
    max_len: int = 11
    purity: float = 0.9
    zipf: float = 1.0
    token_focus: float = 0.75
    patch_noise: float = 0.5

    def __post_init__(self):
        if min(self.num_users, self.num_items, self.num_latent_clusters) < 1:
            raise ConfigError("num_users, num_items and num_latent_clusters must be positive")
        if self.num_latent_clusters > self.num_items:
            raise ConfigError("more clusters than items")
        if not 3 <= self.min_len <= self.max_len:
            raise ConfigError("need 3 <= min_len <= max_len")
        if self.max_len > self.num_items:
            raise ConfigError("max_len exceeds num_items")
        if self.vocab < self.num_latent_clusters:
            raise ConfigError("vocab smaller than the number of clusters")


@dataclass
class Dataset:
    tokens: np.ndarray  # (V+1, text_len) int32
    patches: np.ndarray  # (V+1, patch_len, patch_dim) float64
    clusters: np.ndarray  # (V+1,) int32, -1 for the null item
    users: dict  # user id -> int64 array of item ids
    vocab: int
    spec: GenSpec | None = None

    @property
    def num_items(self) -> int:
        return self.tokens.shape[0] - 1

    def raw(self, ids, modality):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 1 or ids.max() > self.num_items):
            raise DataError("item id out of range")
        if modality == "text":
            return self.tokens[ids].astype(np.int64)
        if modality == "image":
            return self.patches[ids]
        raise ConfigError(f"unknown modality {modality!r}")


def generate(spec: GenSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    v, k = spec.num_items, spec.num_latent_clusters
    clusters = rng.permutation(np.arange(v) % k).astype(np.int32)
    members = [np.flatnonzero(clusters == c) for c in range(k)]

    band = spec.vocab // k
    tokens = np.empty((v, spec.text_len), dtype=np.int32)
    own = rng.random((v, spec.text_len)) < spec.token_focus
    in_band = rng.integers(0, band, size=(v, spec.text_len)) + clusters[:, None] * band
    anywhere = rng.integers(0, spec.vocab, size=(v, spec.text_len))
    tokens[:] = np.where(own, in_band, anywhere)

    centroids = rng.normal(0.0, 1.0, size=(k, spec.patch_dim))
    item_shift = rng.normal(0.0, 0.5, size=(v, 1, spec.patch_dim))
    noise = rng.normal(0.0, spec.patch_noise, size=(v, spec.patch_len, spec.patch_dim))
    patches = centroids[clusters][:, None, :] + item_shift + noise

    weights = np.empty(v)
    for idx in members:
        ranks = rng.permutation(len(idx)) + 1.0
        weights[idx] = ranks ** -spec.zipf
    within = [weights[idx] / weights[idx].sum() for idx in members]
    global_p = weights / weights.sum()

    users = {}
    for u in range(spec.num_users):
        pref = rng.integers(k)
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        seq: list[int] = []
        while len(seq) < length:
            if rng.random() < spec.purity:
                item = int(rng.choice(members[pref], p=within[pref]))
            else:
                item = int(rng.choice(v, p=global_p))
            if item + 1 not in seq:
                seq.append(item + 1)
        users[u] = np.array(seq, dtype=np.int64)

    null_tok = np.zeros((1, spec.text_len), dtype=np.int32)
    null_patch = np.zeros((1, spec.patch_len, spec.patch_dim))
    return Dataset(
        tokens=np.concatenate([null_tok, tokens]),
        patches=np.concatenate([null_patch, patches]),
        clusters=np.concatenate([[-1], clusters]).astype(np.int32),
        users=users,
        vocab=spec.vocab,
        spec=spec,
    )


def to_bytes(ds: Dataset) -> bytes:
    v = ds.num_items
    k = int(ds.clusters.max()) + 1 if v else 0
    parts = [
        _HEADER.pack(MAGIC, VERSION, v, len(ds.users), ds.tokens.shape[1], ds.vocab,
                     ds.patches.shape[1], ds.patches.shape[2], k),
        ds.tokens.astype("<i4").tobytes(),
        ds.patches.astype("<f8").tobytes(),
        ds.clusters.astype("<i4").tobytes(),
    ]
    for uid in sorted(ds.users):
        seq = ds.users[uid]
        parts.append(struct.pack("<2I", uid, len(seq)))
        parts.append(np.asarray(seq, dtype="<u4").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise DataError("dataset file truncated")
    magic, version, v, nu, tl, vocab, pl, pd, _ = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DataError(f"not a dataset file (magic {magic!r})")
    if version != VERSION:
        raise DataError(f"unsupported dataset version {version}")
    off = _HEADER.size
    try:
        n_tok = (v + 1) * tl
        tokens = np.frombuffer(buf, "<i4", n_tok, off).reshape(v + 1, tl).astype(np.int32)
        off += 4 * n_tok
        n_p = (v + 1) * pl * pd
        patches = np.frombuffer(buf, "<f8", n_p, off).reshape(v + 1, pl, pd).astype(np.float64)
        off += 8 * n_p
        clusters = np.frombuffer(buf, "<i4", v + 1, off).astype(np.int32)
        off += 4 * (v + 1)
        users = {}
        for _ in range(nu):
            uid, length = struct.unpack_from("<2I", buf, off)
            off += 8
            users[uid] = np.frombuffer(buf, "<u4", length, off).astype(np.int64)
            off += 4 * length
    except (ValueError, struct.error) as exc:
        raise DataError(f"dataset file truncated or corrupt: {exc}") from None
    if off != len(buf):
        raise DataError("trailing bytes in dataset file")
    return Dataset(tokens, patches, clusters, users, vocab)


def save(ds: Dataset, path, digest: str | None = None) -> dict:
    """Write the binary file and a JSON manifest next to it (``<path>.json``)."""
    path = Path(path)
    blob = to_bytes(ds)
    path.write_bytes(blob)
    manifest = {
        "format": MAGIC.decode(),
        "version": VERSION,
        "num_items": ds.num_items,
        "num_users": len(ds.users),
        "interactions": int(sum(len(s) for s in ds.users.values())),
        "seed": ds.spec.seed if ds.spec else None,
        "spec": asdict(ds.spec) if ds.spec else None,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "config_digest": digest,
    }
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    return from_bytes(path.read_bytes())


# ---------------------------------------------------------------------------
# splitting and popularity


@dataclass
class PopularityTable:
    counts: np.ndarray  # (V+1,), index 0 unused
    p: np.ndarray  # (V+1,), p[0] = 0

    @classmethod
    def from_train(cls, train: dict, num_items: int) -> "PopularityTable":
        counts = np.zeros(num_items + 1, dtype=np.int64)
        for seq in train.values():
            np.add.at(counts, np.asarray(seq, dtype=np.int64), 1)
        total = counts[1:].sum()
        p = np.zeros(num_items + 1)
        p[1:] = (counts[1:] + 1.0) / (total + num_items)
        return cls(counts, p)

    def logp(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and ids.min() < 1:
            raise DataError("popularity requested for the null item")
        return np.log(self.p[ids])


@dataclass
class Splits:
    train: dict  # user -> item ids
    valid: tuple  # (contexts list, targets array)
    test: tuple
    popularity: PopularityTable
    num_items: int
    users: np.ndarray


def split_and_popularity(ds: Dataset) -> Splits:
    """Leave-one-out: last item tests, second-to-last validates, the rest trains."""
    train, vctx, vtgt, tctx, ttgt = {}, [], [], [], []
    users = np.array(sorted(ds.users), dtype=np.int64)
    for u in users:
        seq = np.asarray(ds.users[u], dtype=np.int64)
        if len(seq) < 3:
            raise DataError(f"user {u} has {len(seq)} interactions; leave-one-out needs 3")
        train[int(u)] = seq[:-2]
        vctx.append(seq[:-2])
        vtgt.append(seq[-2])
        tctx.append(seq[:-1])
        ttgt.append(seq[-1])
    pop = PopularityTable.from_train(train, ds.num_items)
    return Splits(train, (vctx, np.array(vtgt, dtype=np.int64)),
                  (tctx, np.array(ttgt, dtype=np.int64)), pop, ds.num_items, users)


def popularity_scores(splits: Splits, num_users: int) -> np.ndarray:
    """(U, V) scores ranking every item by training popularity."""
    return np.broadcast_to(splits.popularity.p[1:], (num_users, splits.num_items)).copy()


def cluster_oracle_scores(ds: Dataset, splits: Splits, contexts) -> np.ndarray:
    """Popularity scores boosted for the majority cluster of each context."""
    base = splits.popularity.p[1:]
    item_cluster = ds.clusters[1:]
    out = np.empty((len(contexts), ds.num_items))
    for r, ctx in enumerate(contexts):
        major = np.bincount(ds.clusters[np.asarray(ctx)]).argmax()
        out[r] = base + (item_cluster == major)
    return out
