import pytest

from iisan.config import DEFAULTS, load_config, parse_override
from iisan.errors import ConfigError


def test_defaults_build_every_section():
    cfg = load_config()
    assert cfg.method.method == "iisan"
    enc = cfg.encoders
    assert enc["text"].layers == enc["image"].layers == 4
    assert enc["text"].modality == "text" and enc["image"].modality == "image"
    assert cfg.training.epochs == 20
    assert (cfg.alpha.time, cfg.alpha.params, cfg.alpha.memory) == (0.45, 0.1, 0.45)


def test_yaml_file_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("method:\n  method: lora\ntraining:\n  lr: 0.01\nbackbone:\n  image:\n    seq_len: 6\n")
    cfg = load_config(p, ["training.epochs=3", "adaptation.layerdrop=keep_all"])
    assert cfg.method.method == "lora" and cfg.training.lr == 0.01 and cfg.training.epochs == 3
    assert cfg.encoders["image"].seq_len == 6 and cfg.encoders["text"].seq_len != 6
    assert cfg.adaptation.layerdrop == "keep_all"
    assert parse_override("a.b=[1, 2]") == (["a", "b"], [1, 2])


def test_digest_ignores_locations_but_not_experiment():
    a = load_config()
    b = load_config(None, ["out_dir=elsewhere", "dataset=x.iisd"])
    c = load_config(None, ["training.seed=1"])
    assert a.digest() == b.digest() != c.digest()
    assert len(a.digest()) == 32 and len(a.digest_hex()) == 16
    assert DEFAULTS["training"]["seed"] == 0  # defaults are never mutated


@pytest.mark.parametrize("override", [
    "training.lr=-1",
    "method.method=prefix",
    "method.unknown=1",
    "backbone.heads=5",
    "efficiency.alpha=[0.5, 0.5, 0.5]",
    "efficiency.cache_width=2",
    "backbone.text.hidden_dim=16",
    "novalue",
])
def test_bad_values_are_config_errors(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    p = tmp_path / "c.yaml"
    p.write_text("- a list\n")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("mystery: 1\n")
    with pytest.raises(ConfigError, match="mystery"):
        load_config(p)
