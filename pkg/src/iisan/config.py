"""Run configuration: one YAML file, dotted flag overrides, and a stable digest."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .adaptation import AdaptationConfig
from .backbone import EncoderConfig
from .baselines import MethodConfig
from .data import GenSpec
from .efficiency import TpmeWeights
from .errors import ConfigError
from .recsys import SeqEncoderConfig

DEFAULTS = {
    "dataset": "data/toy.iisd",
    "cache": None,
    "out_dir": "runs/toy",
    "data": {},
    "method": {"method": "iisan"},
    "backbone": {"layers": 4, "hidden_dim": 32, "heads": 2, "seed": 0, "text": {}, "image": {}},
    "adaptation": {},
    "seq_encoder": {},
    "training": {"lr": 1e-3, "batch_size": 32, "epochs": 20, "seed": 0},
    "efficiency": {"alpha": [0.45, 0.1, 0.45], "cache_width": 8},
}

# Keys that locate files rather than define the experiment.
_LOCATION_KEYS = ("dataset", "cache", "out_dir")


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("training needs lr >= 0, batch_size >= 1, epochs >= 0")


@dataclass
class RunConfig:
    raw: dict

    @property
    def dataset(self) -> Path:
        return Path(self.raw["dataset"])

    @property
    def cache(self) -> Path | None:
        c = self.raw.get("cache")
        return Path(c) if c else None

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["out_dir"])

    @property
    def gen_spec(self) -> GenSpec:
        return _build(GenSpec, self.raw["data"], "data")

    @property
    def method(self) -> MethodConfig:
        return _build(MethodConfig, self.raw["method"], "method")

    @property
    def encoders(self) -> dict[str, EncoderConfig]:
        bb = self.raw["backbone"]
        shared = {k: v for k, v in bb.items() if k not in ("text", "image")}
        out = {}
        for mod in ("text", "image"):
            own = dict(shared, **(bb.get(mod) or {}), modality=mod)
            out[mod] = _build(EncoderConfig, own, f"backbone.{mod}")
        return out

    @property
    def adaptation(self) -> AdaptationConfig:
        raw = dict(self.raw["adaptation"])
        if "modalities" in raw:
            raw["modalities"] = tuple(raw["modalities"])
        return _build(AdaptationConfig, raw, "adaptation")

    @property
    def seq_encoder(self) -> SeqEncoderConfig:
        return _build(SeqEncoderConfig, self.raw["seq_encoder"], "seq_encoder")

    @property
    def training(self) -> TrainingConfig:
        return _build(TrainingConfig, self.raw["training"], "training")

    @property
    def alpha(self) -> TpmeWeights:
        a = self.raw["efficiency"]["alpha"]
        if len(a) != 3:
            raise ConfigError("efficiency.alpha needs three weights")
        return TpmeWeights(*map(float, a))

    @property
    def cache_width(self) -> int:
        return int(self.raw["efficiency"]["cache_width"])

    def validate(self):
        """Touch every section so bad values fail before any work starts."""
        self.gen_spec, self.method, self.encoders, self.adaptation
        self.seq_encoder, self.training, self.alpha
        if self.cache_width not in (4, 8):
            raise ConfigError("efficiency.cache_width must be 4 or 8")
        for mod, c in self.encoders.items():
            if c.hidden_dim != self.encoders["text"].hidden_dim:
                raise ConfigError("text and image backbones must share hidden_dim")
        return self

    def digest(self) -> bytes:
        body = {k: v for k, v in self.raw.items() if k not in _LOCATION_KEYS}
        payload = json.dumps(body, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(payload.encode()).digest()

    def digest_hex(self) -> str:
        return self.digest().hex()[:16]


def _build(cls, raw, section):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    """``a.b.c=value`` with the value parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, _, value = item.partition("=")
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        parsed = yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {item!r}: {exc}") from None
    return key.split("."), parsed


def apply_override(raw: dict, path: list[str], value) -> dict:
    node = raw
    for k in path[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[path[-1]] = value
    return raw


def load_config(path=None, overrides=()) -> RunConfig:
    raw = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        raw = _merge(raw, user)
    for item in overrides:
        apply_override(raw, *parse_override(item))
    return RunConfig(raw).validate()
