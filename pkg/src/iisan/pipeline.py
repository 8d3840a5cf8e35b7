"""Glue shared by the CLI and scripted experiments: build a method, train it, profile it."""
from __future__ import annotations

from dataclasses import dataclass, field

from .adaptation import AdaptationConfig
from .baselines import MethodConfig, build_method
from .cache import open_cache
from .config import TrainingConfig
from .efficiency import measure_epoch
from .errors import ConfigError
from .optim import Adam
from .recsys import SeqEncoder, SeqEncoderConfig, train_epoch


@dataclass
class Run:
    method: object
    optimizer: Adam
    history: list = field(default_factory=list)


def check_dataset(encoder_configs, ds):
    """The item table must fit the encoders' vocabulary and patch geometry."""
    text, image = encoder_configs["text"], encoder_configs["image"]
    if ds.vocab > text.vocab_or_patch_dim:
        raise ConfigError(f"dataset vocab {ds.vocab} exceeds text encoder vocab {text.vocab_or_patch_dim}")
    if ds.tokens.shape[1] != text.seq_len:
        raise ConfigError(f"dataset text_len {ds.tokens.shape[1]} != text seq_len {text.seq_len}")
    if ds.patches.shape[1:] != (image.seq_len, image.vocab_or_patch_dim):
        raise ConfigError(
            f"dataset patches {ds.patches.shape[1:]} != image encoder "
            f"({image.seq_len}, {image.vocab_or_patch_dim})"
        )


def build_run(
    method_cfg: MethodConfig,
    encoder_configs,
    seq_cfg: SeqEncoderConfig,
    training: TrainingConfig,
    items=None,
    adaptation: AdaptationConfig | None = None,
    cache=None,
) -> Run:
    """Fresh method and optimizer. ``cache`` may be a CacheStore or a path."""
    if cache is not None and not hasattr(cache, "stacks"):
        cache = open_cache(cache, encoder_configs["text"], encoder_configs["image"])
    if items is not None:
        check_dataset(encoder_configs, items)
    method = build_method(method_cfg, encoder_configs, SeqEncoder(seq_cfg), items=items,
                          cache=cache, adaptation=adaptation)
    return Run(method, Adam(method.trainable.values(), lr=training.lr))


def fit(run: Run, splits, training: TrainingConfig, epochs=None, on_epoch=None,
        saving: str = "graph") -> Run:
    epochs = training.epochs if epochs is None else epochs
    start = len(run.history)
    for e in range(start, start + epochs):
        stats = train_epoch(run.method, splits, run.optimizer, training.batch_size, e, training.seed,
                            saving)
        run.history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return run


def profile(run: Run, splits, training: TrainingConfig, epochs: int = 3, saving: str = "graph"):
    """Train ``epochs`` timed epochs and reduce them to a cost sample."""
    fit(run, splits, training, epochs=epochs, saving=saving)
    return measure_epoch(run.history[-epochs:], run.method, run.optimizer)
