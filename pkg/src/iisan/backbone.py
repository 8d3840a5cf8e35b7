"""Frozen toy-scale text and image transformer encoders."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .nn import block_param_count, init_block, transformer_block
from .tensor import Tensor, embed_lookup, matmul, parameter

MODALITIES = ("text", "image")
_DEFAULT_SEQ = {"text": 8, "image": 10}
_DEFAULT_VOCAB = {"text": 256, "image": 16}


@dataclass(frozen=True)
class EncoderConfig:
    modality: str = "text"
    layers: int = 4
    hidden_dim: int = 32
    heads: int = 2
    seq_len: int | None = None
    vocab_or_patch_dim: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.seq_len is None:
            object.__setattr__(self, "seq_len", _DEFAULT_SEQ[self.modality])
        if self.vocab_or_patch_dim is None:
            object.__setattr__(self, "vocab_or_patch_dim", _DEFAULT_VOCAB[self.modality])
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.hidden_dim < 1 or self.heads < 1 or self.hidden_dim % self.heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} must be divisible by heads {self.heads}"
            )
        if self.vocab_or_patch_dim < 1:
            raise ConfigError("vocab_or_patch_dim must be positive")

    def to_dict(self):
        return asdict(self)


def config_digest(*configs) -> bytes:
    """32-byte SHA-256 over the canonical JSON of one or more configs."""
    payload = json.dumps([c.to_dict() for c in configs], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).digest()


@dataclass
class HiddenStack:
    """Pooled per-layer states h_0..h_L of one item, shape (L+1, d)."""

    states: np.ndarray = field(repr=False)

    def __len__(self):
        return self.states.shape[0]

    def __getitem__(self, i):
        return self.states[i]

    def __eq__(self, other):
        return isinstance(other, HiddenStack) and np.array_equal(self.states, other.states)


def embedding_param_shapes(config: EncoderConfig) -> dict[str, tuple]:
    d, s, v = config.hidden_dim, config.seq_len, config.vocab_or_patch_dim
    if config.modality == "text":
        return {"embed.tok": (v, d), "embed.pos": (s, d)}
    return {"embed.patch.w": (v, d), "embed.patch.b": (d,), "embed.pos": (s, d)}


def encoder_param_count(config: EncoderConfig) -> int:
    emb = sum(math.prod(s) for s in embedding_param_shapes(config).values())
    return emb + config.layers * block_param_count(config.hidden_dim)


class FrozenEncoder:
    """Embedding layer plus L pre-LN transformer blocks, all frozen by default."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, MODALITIES.index(config.modality)])
        self.params: dict[str, Tensor] = {}
        for name, shape in embedding_param_shapes(config).items():
            if name == "embed.patch.b":
                arr = np.zeros(shape)
            elif name == "embed.patch.w":
                arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
            elif name == "embed.pos":
                arr = rng.normal(0.0, 0.1, size=shape)
            else:
                arr = rng.normal(0.0, 1.0, size=shape)
            self.params[name] = parameter(arr, trainable=False, name=f"{config.modality}.{name}")
        self.blocks: list[dict[str, Tensor]] = []
        for i in range(config.layers):
            block = init_block(rng, config.hidden_dim, prefix=f"{config.modality}.blocks.{i}.")
            self.blocks.append(block)
            for name, t in block.items():
                self.params[f"blocks.{i}.{name}"] = t

    @property
    def modality(self):
        return self.config.modality

    def validate_input(self, x: np.ndarray):
        c = self.config
        if c.modality == "text":
            if x.ndim != 2 or x.shape[1] != c.seq_len:
                raise DataError(f"text input must be (N, {c.seq_len}) token ids, got {x.shape}")
            if x.size and (x.min() < 0 or x.max() >= c.vocab_or_patch_dim):
                raise DataError("token id out of vocabulary range")
        else:
            want = (c.seq_len, c.vocab_or_patch_dim)
            if x.ndim != 3 or x.shape[1:] != want:
                raise DataError(f"image input must be (N, {want[0]}, {want[1]}), got {x.shape}")

    def embed(self, x: np.ndarray) -> Tensor:
        p = self.params
        if self.config.modality == "text":
            h = embed_lookup(p["embed.tok"], x)
        else:
            h = matmul(Tensor(x), p["embed.patch.w"]) + p["embed.patch.b"]
        return h + p["embed.pos"]

    def forward(self, x: np.ndarray, hooks: list[dict] | None = None) -> list[Tensor]:
        """Run a batch of N items; returns the L+1 pooled (N, d) states.

        Pooling takes the first-position vector of each layer output.
        """
        self.validate_input(x)
        h = self.embed(x)
        pooled = [h[:, 0, :]]
        for i, block in enumerate(self.blocks):
            h = transformer_block(block, h, self.config.heads, hooks=hooks[i] if hooks else None)
            pooled.append(h[:, 0, :])
        return pooled

    def encode_batch(self, x: np.ndarray) -> np.ndarray:
        """Frozen forward of N items, returning an (N, L+1, d) array."""
        states = self.forward(np.asarray(x))
        return np.stack([s.data for s in states], axis=1)

    def encode(self, item_input) -> HiddenStack:
        return HiddenStack(self.encode_batch(np.asarray(item_input)[None])[0])

    def parameter_bytes(self) -> int:
        return sum(t.nbytes for t in self.params.values())


def init_encoder(config: EncoderConfig) -> FrozenEncoder:
    return FrozenEncoder(config)
