"""Decoupled side networks over frozen backbone states.

Three gated towers consume the pooled per-layer states of the frozen text
and image encoders: one intra-modal tower per modality and one inter-modal
tower that mixes the two. A linear fusion layer maps the concatenated
tower outputs ``[image : inter : text]`` to the item embedding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .nn import linear
from .tensor import Tensor, concat, gelu, parameter, sigmoid

TOWER_KINDS = ("image_intra", "inter", "text_intra")


@dataclass(frozen=True)
class LayerDropPlan:
    """Sorted backbone block indices (1..L) whose states feed side blocks."""

    keep: tuple[int, ...]

    def __len__(self):
        return len(self.keep)


def layerdrop_plan(num_layers: int, policy="keep_even") -> LayerDropPlan:
    """Build a plan from ``keep_all``, ``keep_even``, ``every:K`` or an explicit set.

    ``every:K`` keeps blocks K, 2K, ... up to L, so at L=12 the policies
    every:6, every:4, every:3, every:2, every:1 give 2, 3, 4, 6 and 12 blocks.
    """
    if num_layers < 1:
        raise ConfigError(f"num_layers must be >= 1, got {num_layers}")
    if isinstance(policy, str):
        if policy == "keep_all":
            keep = range(1, num_layers + 1)
        elif policy == "keep_even":
            keep = range(2, num_layers + 1, 2)
        elif policy.startswith("every:"):
            k = int(policy.split(":", 1)[1])
            if k < 1:
                raise ConfigError(f"invalid layerdrop stride {k}")
            keep = range(k, num_layers + 1, k)
        else:
            raise ConfigError(f"unknown layerdrop policy {policy!r}")
    else:
        keep = list(policy)
        bad = [i for i in keep if not 1 <= int(i) <= num_layers]
        if bad:
            raise ConfigError(f"layerdrop indices {bad} outside 1..{num_layers}")
    keep = tuple(sorted({int(i) for i in keep}))
    if not keep:
        raise ConfigError("layerdrop plan keeps no blocks")
    return LayerDropPlan(keep)


class SanBlock:
    """Bottleneck side block: x + up(gelu(down(x)))."""

    def __init__(self, rng: np.random.Generator, d: int, r: int, prefix: str):
        self.params = {
            "down.w": parameter(rng.normal(0, 1 / math.sqrt(d), (d, r)), name=prefix + "down.w"),
            "down.b": parameter(np.zeros(r), name=prefix + "down.b"),
            "up.w": parameter(rng.normal(0, 1 / math.sqrt(r), (r, d)), name=prefix + "up.w"),
            "up.b": parameter(np.zeros(d), name=prefix + "up.b"),
        }

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        return x + linear(gelu(linear(x, p["down.w"], p["down.b"])), p["up.w"], p["up.b"])


def sanb_param_count(d: int, r: int) -> int:
    return 2 * d * r + r + d


class GatedTower:
    """Chain of side blocks, one per kept layer, joined by scalar sigmoid gates.

    The first block of an intra tower reads the embedding-layer state alone,
    so intra towers carry one gate fewer than blocks. The inter tower gates
    every block, including the first (image vs text embedding mix).
    """

    def __init__(self, kind: str, d: int, r: int, plan: LayerDropPlan, rng: np.random.Generator):
        if kind not in TOWER_KINDS:
            raise ConfigError(f"unknown tower kind {kind!r}")
        self.kind = kind
        self.plan = plan
        self.d = d
        self.blocks = [SanBlock(rng, d, r, f"{kind}.blocks.{j}.") for j in range(len(plan))]
        gated = plan.keep if kind == "inter" else plan.keep[1:]
        self.gates = {
            layer: parameter(np.zeros(1), name=f"{kind}.gate.{layer}") for layer in gated
        }

    @property
    def params(self) -> dict[str, Tensor]:
        out = {}
        for j, block in enumerate(self.blocks):
            for name, t in block.params.items():
                out[f"blocks.{j}.{name}"] = t
        for layer, g in self.gates.items():
            out[f"gate.{layer}"] = g
        return out

    def gate_values(self) -> dict[int, float]:
        return {layer: float(1.0 / (1.0 + np.exp(-g.data[0]))) for layer, g in self.gates.items()}


def _layer(states: np.ndarray, i: int) -> Tensor:
    return Tensor(np.ascontiguousarray(states[:, i, :]))


def _check_stack(tower: GatedTower, states: np.ndarray, label: str):
    if states.ndim != 3 or states.shape[2] != tower.d:
        raise ConfigError(f"{label} states have shape {states.shape}, expected (N, L+1, {tower.d})")
    if states.shape[1] <= tower.plan.keep[-1]:
        raise ConfigError(
            f"{label} stack has {states.shape[1]} states but plan keeps layer {tower.plan.keep[-1]}"
        )


def intra_forward(tower: GatedTower, states: np.ndarray, plan: LayerDropPlan | None = None) -> Tensor:
    """Gated chain over one modality's (N, L+1, d) pooled states.

    block_1 <- h_0; block_j <- mu * prev + (1 - mu) * h_layer for later kept layers.
    """
    if plan is not None and plan != tower.plan:
        raise ConfigError(f"tower sized for {tower.plan.keep}, got plan {plan.keep}")
    if tower.kind == "inter":
        raise ConfigError("intra_forward needs an intra tower")
    _check_stack(tower, states, tower.kind)
    out = tower.blocks[0](_layer(states, 0))
    for j, layer in enumerate(tower.plan.keep[1:], start=1):
        mu = sigmoid(tower.gates[layer])
        x = mu * out + (1.0 - mu) * _layer(states, layer)
        out = tower.blocks[j](x)
    return out


def inter_forward(
    tower: GatedTower,
    text_states: np.ndarray,
    image_states: np.ndarray,
    plan: LayerDropPlan | None = None,
) -> Tensor:
    """Cross-modal chain: block_j <- beta * h_img + (1 - beta) * h_txt + prev.

    The first block mixes the two embedding-layer states with no history term.
    """
    if plan is not None and plan != tower.plan:
        raise ConfigError(f"tower sized for {tower.plan.keep}, got plan {plan.keep}")
    if tower.kind != "inter":
        raise ConfigError("inter_forward needs the inter tower")
    if text_states.shape != image_states.shape:
        raise ConfigError(
            f"modality stacks differ: text {text_states.shape} vs image {image_states.shape}"
        )
    _check_stack(tower, text_states, "inter")
    out = None
    for j, layer in enumerate(tower.plan.keep):
        src = 0 if j == 0 else layer
        beta = sigmoid(tower.gates[layer])
        x = beta * _layer(image_states, src) + (1.0 - beta) * _layer(text_states, src)
        if out is not None:
            x = x + out
        out = tower.blocks[j](x)
    return out


@dataclass(frozen=True)
class AdaptationConfig:
    bottleneck: int = 8
    layerdrop: object = "keep_even"
    use_intra: bool = True
    use_inter: bool = True
    modalities: tuple[str, ...] = ("text", "image")
    frozen_backbone: bool = False
    seq_dim: int = 64

    def __post_init__(self):
        mods = tuple(self.modalities)
        object.__setattr__(self, "modalities", mods)
        if not mods or any(m not in ("text", "image") for m in mods) or len(set(mods)) != len(mods):
            raise ConfigError(f"invalid modalities {self.modalities!r}")
        if self.bottleneck < 1 or self.seq_dim < 1:
            raise ConfigError("bottleneck and seq_dim must be positive")
        if not self.frozen_backbone and not (self.use_intra or self.tower_enabled("inter")):
            raise ConfigError("no side tower enabled; set frozen_backbone for a tower-free run")
        if isinstance(self.layerdrop, list):
            object.__setattr__(self, "layerdrop", tuple(self.layerdrop))

    def tower_enabled(self, kind: str) -> bool:
        if self.frozen_backbone:
            return False
        if kind == "inter":
            return self.use_inter and len(self.modalities) == 2
        return self.use_intra and kind.split("_")[0] in self.modalities


class IisanModel:
    """Intra- and inter-modal side towers plus the fusion layer.

    Disabled towers contribute a zero vector to the fusion input so the
    fusion layer keeps its 3d input width under every ablation. With
    ``frozen_backbone`` no tower exists and the last pooled backbone state of
    each modality stands in for its intra tower output.
    """

    def __init__(self, config: AdaptationConfig, num_layers: int, d: int, seed: int = 0):
        self.config = config
        self.d = d
        self.plan = layerdrop_plan(num_layers, config.layerdrop)
        rng = np.random.default_rng([seed, 101])
        self.towers: dict[str, GatedTower] = {}
        for kind in TOWER_KINDS:
            if config.tower_enabled(kind):
                self.towers[kind] = GatedTower(kind, d, config.bottleneck, self.plan, rng)
        self.fl_w = parameter(
            rng.normal(0, 1 / math.sqrt(3 * d), (3 * d, config.seq_dim)), name="fusion.w"
        )
        self.fl_b = parameter(np.zeros(config.seq_dim), name="fusion.b")

    @property
    def params(self) -> dict[str, Tensor]:
        out = {}
        for kind, tower in self.towers.items():
            for name, t in tower.params.items():
                out[f"{kind}.{name}"] = t
        out["fusion.w"] = self.fl_w
        out["fusion.b"] = self.fl_b
        return out

    def tower_outputs(self, text_states, image_states) -> tuple[Tensor, Tensor, Tensor]:
        """(e_image, e_inter, e_text), zero-filled where a tower is disabled."""
        n = (text_states if text_states is not None else image_states).shape[0]
        zero = Tensor(np.zeros((n, self.d)))
        mods = self.config.modalities
        if self.config.frozen_backbone:
            e_img = _layer(image_states, image_states.shape[1] - 1) if "image" in mods else zero
            e_txt = _layer(text_states, text_states.shape[1] - 1) if "text" in mods else zero
            return e_img, zero, e_txt
        e_img = e_inter = e_txt = zero
        if "image_intra" in self.towers:
            e_img = intra_forward(self.towers["image_intra"], image_states)
        if "text_intra" in self.towers:
            e_txt = intra_forward(self.towers["text_intra"], text_states)
        if "inter" in self.towers:
            e_inter = inter_forward(self.towers["inter"], text_states, image_states)
        return e_img, e_inter, e_txt

    def __call__(self, text_states, image_states) -> Tensor:
        return fuse_item(self, *self.tower_outputs(text_states, image_states))


def fuse_item(model: IisanModel, e_image: Tensor, e_inter: Tensor, e_text: Tensor) -> Tensor:
    """Linear fusion of the concatenation [e_image : e_inter : e_text]."""
    for label, e in (("image", e_image), ("inter", e_inter), ("text", e_text)):
        if e.shape[-1] != model.d:
            raise ConfigError(f"fuse_item: {label} input has width {e.shape[-1]}, expected {model.d}")
    return linear(concat([e_image, e_inter, e_text], axis=-1), model.fl_w, model.fl_b)


def iisan_param_count(config: AdaptationConfig, num_layers: int, d: int) -> int:
    """Closed-form trainable count of the side network and fusion layer."""
    keep = len(layerdrop_plan(num_layers, config.layerdrop))
    total = 3 * d * config.seq_dim + config.seq_dim
    for kind in TOWER_KINDS:
        if config.tower_enabled(kind):
            gates = keep if kind == "inter" else keep - 1
            total += keep * sanb_param_count(d, config.bottleneck) + gates
    return total
