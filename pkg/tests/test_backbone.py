import math

import numpy as np
import pytest

from iisan.backbone import (
    EncoderConfig,
    FrozenEncoder,
    HiddenStack,
    config_digest,
    encoder_param_count,
)
from iisan.errors import ConfigError, DataError
from iisan.tensor import Tape


def _ref_block(p, x, heads):
    """Per-item, per-head loop version of a pre-LN block."""
    def ln(z, g, b):
        mu = z.mean(-1, keepdims=True)
        var = ((z - mu) ** 2).mean(-1, keepdims=True)
        return (z - mu) / np.sqrt(var + 1e-5) * g + b

    def gelu(z):
        return 0.5 * z * (1 + np.tanh(math.sqrt(2 / math.pi) * (z + 0.044715 * z**3)))

    w = {k: t.data for k, t in p.items()}
    out = np.empty_like(x)
    s, d = x.shape[1:]
    dh = d // heads
    for n in range(x.shape[0]):
        h = ln(x[n], w["ln1.g"], w["ln1.b"])
        q = h @ w["attn.q.w"] + w["attn.q.b"]
        k = h @ w["attn.k.w"] + w["attn.k.b"]
        v = h @ w["attn.v.w"] + w["attn.v.b"]
        ctx = np.empty((s, d))
        for j in range(heads):
            sl = slice(j * dh, (j + 1) * dh)
            sc = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            pr = np.exp(sc - sc.max(-1, keepdims=True))
            pr /= pr.sum(-1, keepdims=True)
            ctx[:, sl] = pr @ v[:, sl]
        y = x[n] + ctx @ w["attn.o.w"] + w["attn.o.b"]
        h2 = ln(y, w["ln2.g"], w["ln2.b"])
        out[n] = y + gelu(h2 @ w["mlp.fc1.w"] + w["mlp.fc1.b"]) @ w["mlp.fc2.w"] + w["mlp.fc2.b"]
    return out


@pytest.mark.parametrize("modality", ["text", "image"])
def test_forward_matches_loop_reference(modality):
    cfg = EncoderConfig(modality=modality, layers=2, hidden_dim=8, heads=2, seed=4)
    enc = FrozenEncoder(cfg)
    r = np.random.default_rng(0)
    if modality == "text":
        x = r.integers(0, 256, (3, cfg.seq_len))
        h = enc.params["embed.tok"].data[x]
    else:
        x = r.normal(size=(3, cfg.seq_len, 16))
        h = x @ enc.params["embed.patch.w"].data + enc.params["embed.patch.b"].data
    h = h + enc.params["embed.pos"].data
    want = [h[:, 0]]
    for block in enc.blocks:
        h = _ref_block(block, h, cfg.heads)
        want.append(h[:, 0])
    got = enc.encode_batch(x)
    assert got.shape == (3, cfg.layers + 1, cfg.hidden_dim)
    np.testing.assert_allclose(got, np.stack(want, axis=1), atol=1e-12)


def test_same_seed_same_states_and_frozen_forward_tapes_nothing():
    cfg = EncoderConfig(modality="text", seed=9)
    x = np.arange(16).reshape(2, 8)
    a, b = FrozenEncoder(cfg), FrozenEncoder(cfg)
    with Tape() as tape:
        sa = a.encode_batch(x)
    assert tape.stats().node_count == 0
    np.testing.assert_array_equal(sa, b.encode_batch(x))
    assert all(not t.requires_grad for t in a.params.values())


def test_hidden_stack_length_and_equality():
    enc = FrozenEncoder(EncoderConfig(modality="image", layers=3))
    x = np.zeros((10, 16))
    s = enc.encode(x)
    assert isinstance(s, HiddenStack) and len(s) == 4
    assert s == enc.encode(x)


def test_param_count_closed_form():
    for mod in ("text", "image"):
        cfg = EncoderConfig(modality=mod, layers=3, hidden_dim=16, heads=4)
        enc = FrozenEncoder(cfg)
        assert sum(t.size for t in enc.params.values()) == encoder_param_count(cfg)


def test_config_errors():
    with pytest.raises(ConfigError):
        EncoderConfig(modality="audio")
    with pytest.raises(ConfigError, match="divisible"):
        EncoderConfig(hidden_dim=30, heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(layers=0)


def test_input_validation():
    text = FrozenEncoder(EncoderConfig(modality="text"))
    with pytest.raises(DataError, match="vocabulary"):
        text.encode_batch(np.full((1, 8), 256))
    with pytest.raises(DataError):
        text.encode_batch(np.zeros((1, 7), dtype=int))
    image = FrozenEncoder(EncoderConfig(modality="image"))
    with pytest.raises(DataError):
        image.encode_batch(np.zeros((1, 10, 15)))


def test_digest_tracks_every_field():
    a = EncoderConfig(modality="text")
    assert len(config_digest(a)) == 32
    assert config_digest(a) == config_digest(EncoderConfig(modality="text"))
    assert config_digest(a) != config_digest(EncoderConfig(modality="text", seed=1))
