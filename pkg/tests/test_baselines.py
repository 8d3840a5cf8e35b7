import numpy as np
import pytest

from iisan.adaptation import AdaptationConfig
from iisan.backbone import EncoderConfig, FrozenEncoder
from iisan.baselines import (
    EMBEDDED,
    METHODS,
    CacheNotApplicableError,
    MethodConfig,
    build_method,
    trainable_param_count,
)
from iisan.cache import build_cache, open_cache
from iisan.errors import CacheError, ConfigError
from iisan.nn import block_param_shapes
from iisan.recsys import SeqEncoder, SeqEncoderConfig
from iisan.tensor import Tape

from support import small_dataset, toy_encoders

SEQ = SeqEncoderConfig()


@pytest.fixture(scope="module")
def items():
    return small_dataset()


def _build(method, items, cache=None, **kw):
    return build_method(MethodConfig(method=method, **kw), toy_encoders(), SeqEncoder(SEQ),
                        items=items, cache=cache)


def _count_by_hand(method, d=32, L=4, r=8):
    """Per-tensor tally from block shapes, independent of the closed form."""
    shapes = block_param_shapes(d)
    seq = 10 * 64 + 2 * sum(int(np.prod(s)) for s in block_param_shapes(64).values()) + 2 * 64
    head = 2 * d * 64 + 64
    embed = {"text": 256 * d + 8 * d, "image": 16 * d + d + 10 * d}
    if method == "fft":
        body = sum(embed.values()) + 2 * L * sum(int(np.prod(s)) for s in shapes.values())
    elif method == "adapter":
        body = 2 * L * 2 * (d * r + r + r * d + d)
    elif method == "lora":
        body = 2 * L * 2 * (d * r + r * d)
    elif method == "bitfit":
        biases = sum(int(np.prod(s)) for n, s in shapes.items() if n.endswith(".b"))
        body = 2 * L * biases + d  # plus the image patch-embedding bias
    else:
        return None
    return seq + head + body


@pytest.mark.parametrize("method", EMBEDDED)
def test_trainable_counts_match_hand_tally(method, items):
    m = _build(method, items)
    assert m.trainable_count() == _count_by_hand(method)
    assert m.trainable_count() == trainable_param_count(m.config, toy_encoders(), SEQ)


@pytest.mark.parametrize("method", ["iisan", "iisan_cached"])
def test_iisan_counts_match_closed_form(method, items, tmp_path):
    cache = None
    if method == "iisan_cached":
        enc = {k: FrozenEncoder(c) for k, c in toy_encoders().items()}
        build_cache(enc, items, range(1, items.num_items + 1), tmp_path / "c")
        cache = open_cache(tmp_path / "c", enc["text"].config, enc["image"].config)
    m = _build(method, items, cache=cache)
    assert m.trainable_count() == trainable_param_count(m.config, toy_encoders(), SEQ)
    assert all(not name.startswith(("text.", "image.")) for name in m.trainable)


def test_full_scale_parameter_counts():
    enc = {
        "text": EncoderConfig("text", 12, 768, 12, seq_len=512, vocab_or_patch_dim=30522),
        "image": EncoderConfig("image", 12, 768, 12, seq_len=197, vocab_or_patch_dim=768),
    }
    counts = {
        m: trainable_param_count(MethodConfig(method=m, adapter_bottleneck=64, lora_rank=8),
                                 enc, SEQ, AdaptationConfig(bottleneck=128))
        for m in ("fft", "adapter", "iisan", "lora", "bitfit")
    }
    values = list(counts.values())
    assert values == sorted(values, reverse=True)
    assert counts["fft"] > 30 * counts["adapter"]
    reference = {"fft": 195e6, "adapter": 5e6, "iisan": 4e6, "lora": 0.8e6, "bitfit": 0.4e6}
    for m, p in reference.items():
        assert abs(counts[m] - p) / p < 0.06, (m, counts[m])


def test_bitfit_trainables_subset_of_fft(items):
    fft = set(_build("fft", items).trainable)
    bitfit = set(_build("bitfit", items).trainable)
    assert bitfit < fft
    assert all(n.endswith(".b") or n.startswith(("seq.", "head.")) for n in bitfit)


@pytest.mark.parametrize("method", EMBEDDED)
def test_zero_init_backbone_output_equals_frozen(method, items):
    m = _build(method, items)
    ids = np.arange(1, 9)
    frozen = {k: FrozenEncoder(c) for k, c in toy_encoders().items()}
    for mod, out in zip(m.modalities, m.backbone_outputs(ids)):
        want = frozen[mod].encode_batch(items.raw(ids, mod))[:, -1]
        np.testing.assert_array_equal(out.data, want)


def test_embedded_methods_tape_the_backbone(items):
    ids = np.arange(1, 9)
    nodes = {}
    for method in ("adapter", "iisan"):
        m = _build(method, items)
        with Tape() as tape:
            m.embed_items(ids)
        nodes[method] = tape.stats().node_count
    assert nodes["adapter"] > 5 * nodes["iisan"]


def test_iisan_backbone_forward_adds_no_nodes(items):
    m = _build("iisan", items)
    ids = np.arange(1, 9)
    with Tape() as tape:
        text, image = m.stacks(ids)
    assert tape.stats().node_count == 0 and text.shape == (8, 5, 32)


@pytest.mark.parametrize("method", EMBEDDED)
def test_embedded_plus_cache_rejected(method, items):
    with pytest.raises(CacheNotApplicableError) as err:
        _build(method, items, cache=object())
    assert isinstance(err.value, CacheError) and err.value.exit_code == 4


def test_config_errors(items):
    with pytest.raises(ConfigError):
        MethodConfig(method="prefix")
    with pytest.raises(ConfigError):
        _build("iisan_cached", items)
    bad = dict(toy_encoders())
    bad["image"] = EncoderConfig("image", layers=3)
    with pytest.raises(ConfigError, match="share"):
        build_method(MethodConfig(), bad, SeqEncoder(SEQ), items=items)


def test_methods_listed():
    assert set(EMBEDDED) < set(METHODS)
