"""Method construction: full fine-tuning, embedded PEFT baselines and IISAN.

Every method shares the frozen backbones' architecture and the sequence
encoder; they differ only in which tensors train and where the trainable
tensors sit relative to the backbone graph.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .adaptation import AdaptationConfig, IisanModel, iisan_param_count, sanb_param_count
from .backbone import EncoderConfig, FrozenEncoder, encoder_param_count
from .errors import CacheError, ConfigError
from .nn import MLP_RATIO, is_bias, linear
from .recsys import SeqEncoder, seq_encoder_param_count
from .tensor import Tensor, concat, gelu, matmul, parameter, scale

METHODS = ("fft", "adapter", "lora", "bitfit", "iisan", "iisan_cached")
EMBEDDED = ("fft", "adapter", "lora", "bitfit")


class CacheNotApplicableError(CacheError):
    """A hidden-state cache was requested for a method whose backbone inputs change."""


@dataclass(frozen=True)
class MethodConfig:
    method: str = "iisan"
    adapter_bottleneck: int = 8
    lora_rank: int = 8
    lora_alpha: float = 16.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.adapter_bottleneck < 1 or self.lora_rank < 1:
            raise ConfigError("adapter bottleneck and LoRA rank must be positive")

    @property
    def embedded(self) -> bool:
        return self.method in EMBEDDED

    def to_dict(self):
        return asdict(self)


class Adapter:
    """Houlsby bottleneck inserted inside a backbone block; zero-init up-projection."""

    def __init__(self, rng, d, r, prefix):
        self.params = {
            "down.w": parameter(rng.normal(0, 1 / math.sqrt(d), (d, r)), name=prefix + "down.w"),
            "down.b": parameter(np.zeros(r), name=prefix + "down.b"),
            "up.w": parameter(np.zeros((r, d)), name=prefix + "up.w"),
            "up.b": parameter(np.zeros(d), name=prefix + "up.b"),
        }

    def __call__(self, h: Tensor) -> Tensor:
        p = self.params
        return h + linear(gelu(linear(h, p["down.w"], p["down.b"])), p["up.w"], p["up.b"])


class LoraDelta:
    """Low-rank update (alpha / r) * x A B added to a frozen projection; B starts at zero."""

    def __init__(self, rng, d, r, alpha, prefix):
        self.scaling = alpha / r
        self.params = {
            "A": parameter(rng.normal(0, 1 / math.sqrt(d), (d, r)), name=prefix + "A"),
            "B": parameter(np.zeros((r, d)), name=prefix + "B"),
        }

    def __call__(self, h: Tensor) -> Tensor:
        return scale(matmul(matmul(h, self.params["A"]), self.params["B"]), self.scaling)


class _MethodBase:
    needs_cache = False
    source = None

    def __init__(self, config: MethodConfig, seq_encoder: SeqEncoder):
        self.config = config
        self.seq_encoder = seq_encoder

    @property
    def name(self):
        return self.config.method

    @property
    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.params.items() if t.requires_grad}

    def trainable_count(self) -> int:
        return sum(t.size for t in self.trainable.values())

    def resident_weight_bytes(self) -> int:
        return sum(t.nbytes for t in self.params.values())

    def _seq_params(self):
        return {f"seq.{k}": t for k, t in self.seq_encoder.params.items()}


class EmbeddedMethod(_MethodBase):
    """FFT, Adapter, LoRA and BitFit: trainable tensors live inside the backbone graph."""

    def __init__(self, config, encoders, seq_encoder, items, modalities):
        super().__init__(config, seq_encoder)
        self.encoders = encoders
        self.items = items
        self.modalities = tuple(m for m in ("image", "text") if m in modalities)
        rng = np.random.default_rng([config.seed, 404])
        self.hooks: dict[str, list[dict]] = {}
        self.extra: dict[str, Tensor] = {}
        for mod in self.modalities:
            enc = encoders[mod]
            d = enc.config.hidden_dim
            for name, t in enc.params.items():
                if config.method == "fft":
                    t.requires_grad = True
                elif config.method == "bitfit":
                    t.requires_grad = is_bias(name)
            per_block = []
            for i in range(enc.config.layers):
                hooks = {}
                if config.method == "adapter":
                    for site in ("attn", "mlp"):
                        pre = f"adapter.{mod}.{i}.{site}."
                        ad = Adapter(rng, d, config.adapter_bottleneck, pre)
                        hooks[f"adapter_{site}"] = ad
                        self.extra.update({pre + k: t for k, t in ad.params.items()})
                elif config.method == "lora":
                    for target in ("q", "v"):
                        pre = f"lora.{mod}.{i}.{target}."
                        lo = LoraDelta(rng, d, config.lora_rank, config.lora_alpha, pre)
                        hooks[f"lora_{target}"] = lo
                        self.extra.update({pre + k: t for k, t in lo.params.items()})
                per_block.append(hooks)
            self.hooks[mod] = per_block
        width = sum(encoders[m].config.hidden_dim for m in self.modalities)
        dim = seq_encoder.config.dim
        self.head_w = parameter(rng.normal(0, 1 / math.sqrt(width), (width, dim)), name="head.w")
        self.head_b = parameter(np.zeros(dim), name="head.b")

    @property
    def params(self) -> dict[str, Tensor]:
        out = {}
        for mod in self.modalities:
            out.update({f"{mod}.{k}": t for k, t in self.encoders[mod].params.items()})
        out.update(self.extra)
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        out.update(self._seq_params())
        return out

    def backbone_outputs(self, ids) -> list[Tensor]:
        outs = []
        for mod in self.modalities:
            raw = self.items.raw(ids, mod)
            outs.append(self.encoders[mod].forward(raw, hooks=self.hooks[mod])[-1])
        return outs

    def embed_items(self, ids) -> Tensor:
        outs = self.backbone_outputs(ids)
        x = outs[0] if len(outs) == 1 else concat(outs, axis=-1)
        return linear(x, self.head_w, self.head_b)


class IisanMethod(_MethodBase):
    """Decoupled side network; backbone states come from live encoders or a cache."""

    def __init__(self, config, seq_encoder, adaptation: AdaptationConfig, num_layers, d,
                 encoders=None, items=None, cache=None):
        super().__init__(config, seq_encoder)
        self.adaptation = adaptation
        self.model = IisanModel(adaptation, num_layers, d, seed=config.seed)
        self.needs_cache = config.method == "iisan_cached"
        if self.needs_cache:
            if cache is None:
                raise ConfigError("iisan_cached needs a hidden-state cache")
            self.encoders = {}
            self.source = cache
        else:
            if encoders is None or items is None:
                raise ConfigError("iisan needs live encoders and an item table")
            self.encoders = encoders
            self.source = _LiveStacks(encoders, items)

    @property
    def params(self) -> dict[str, Tensor]:
        out = {}
        for mod, enc in self.encoders.items():
            out.update({f"{mod}.{k}": t for k, t in enc.params.items()})
        out.update({f"iisan.{k}": t for k, t in self.model.params.items()})
        out.update(self._seq_params())
        return out

    def stacks(self, ids):
        mods = self.adaptation.modalities
        text = self.source.stacks(ids, "text") if "text" in mods else None
        image = self.source.stacks(ids, "image") if "image" in mods else None
        return text, image

    def embed_items(self, ids) -> Tensor:
        return self.model(*self.stacks(ids))


class _LiveStacks:
    def __init__(self, encoders, items):
        self.encoders = encoders
        self.items = items

    def stacks(self, ids, modality):
        return self.encoders[modality].encode_batch(self.items.raw(ids, modality))


def build_method(
    config: MethodConfig,
    encoder_configs: dict[str, EncoderConfig],
    seq_encoder: SeqEncoder,
    items=None,
    cache=None,
    adaptation: AdaptationConfig | None = None,
):
    """Instantiate one method over fresh copies of the backbones.

    Encoders are re-initialized from their configs so a method's trainable
    flags never leak into another method built in the same process.
    """
    adaptation = adaptation or AdaptationConfig()
    _check_encoders(encoder_configs)
    if config.embedded:
        if cache is not None:
            raise CacheNotApplicableError(
                f"method {config.method!r} is an embedded PEFT method; its backbone "
                "states change during training and cannot be cached"
            )
        if items is None:
            raise ConfigError(f"method {config.method!r} needs the item table")
        encoders = {m: FrozenEncoder(c) for m, c in encoder_configs.items()}
        return EmbeddedMethod(config, encoders, seq_encoder, items, adaptation.modalities)
    text = encoder_configs["text"]
    encoders = None
    if config.method == "iisan":
        encoders = {m: FrozenEncoder(c) for m, c in encoder_configs.items()}
    return IisanMethod(config, seq_encoder, adaptation, text.layers, text.hidden_dim,
                       encoders=encoders, items=items, cache=cache)


def _check_encoders(cfgs):
    if set(cfgs) != {"text", "image"}:
        raise ConfigError("encoder configs for both 'text' and 'image' are required")
    t, i = cfgs["text"], cfgs["image"]
    if t.hidden_dim != i.hidden_dim or t.layers != i.layers:
        raise ConfigError(
            f"modalities must share hidden_dim and layers: text ({t.layers}, {t.hidden_dim}) "
            f"vs image ({i.layers}, {i.hidden_dim})"
        )


def trainable_param_count(config: MethodConfig, encoder_configs, seq_config,
                          adaptation: AdaptationConfig | None = None) -> int:
    """Closed-form trainable parameter count; no tensors are allocated."""
    adaptation = adaptation or AdaptationConfig()
    seq = seq_encoder_param_count(seq_config)
    mods = [encoder_configs[m] for m in ("image", "text") if m in adaptation.modalities]
    if not config.embedded:
        t = encoder_configs["text"]
        return seq + iisan_param_count(adaptation, t.layers, t.hidden_dim)
    head = sum(c.hidden_dim for c in mods) * seq_config.dim + seq_config.dim
    body = 0
    for c in mods:
        d, L = c.hidden_dim, c.layers
        if config.method == "fft":
            body += encoder_param_count(c)
        elif config.method == "adapter":
            body += L * 2 * sanb_param_count(d, config.adapter_bottleneck)
        elif config.method == "lora":
            body += L * 2 * (2 * d * config.lora_rank)
        else:
            per_block = 4 * d + MLP_RATIO * d + d + 2 * d
            body += L * per_block + (d if c.modality == "image" else 0)
    return seq + head + body
