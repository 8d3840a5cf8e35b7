import numpy as np
import pytest

from iisan import checkpoint
from iisan.errors import ConfigError, DataError
from iisan.tensor import parameter

DIGEST = bytes(range(32))


def _params(seed=0):
    r = np.random.default_rng(seed)
    return {"a.w": parameter(r.normal(size=(3, 4))), "b": parameter(r.normal(size=5)),
            "s": parameter(np.array(2.5))}


def test_roundtrip_is_exact(tmp_path):
    params = _params()
    checkpoint.save(tmp_path / "c", params, DIGEST)
    digest, arrays = checkpoint.load(tmp_path / "c")
    assert digest == DIGEST and list(arrays) == list(params)
    fresh = _params(seed=1)
    checkpoint.restore(fresh, arrays)
    for k in params:
        np.testing.assert_array_equal(fresh[k].data, params[k].data)


def test_corruption_is_detected():
    blob = checkpoint.to_bytes(_params(), DIGEST)
    for bad in (blob[:-1], blob + b"x", b"ZZZZ" + blob[4:], blob[:10]):
        with pytest.raises(DataError):
            checkpoint.from_bytes(bad)
    with pytest.raises(ConfigError):
        checkpoint.to_bytes(_params(), b"short")


def test_restore_mismatch():
    _, arrays = checkpoint.from_bytes(checkpoint.to_bytes(_params(), DIGEST))
    fewer = {"a.w": parameter(np.zeros((3, 4)))}
    with pytest.raises(ConfigError, match="does not match"):
        checkpoint.restore(fewer, arrays)
    checkpoint.restore(fewer, arrays, strict=False)
    with pytest.raises(ConfigError, match="shape"):
        checkpoint.restore({"a.w": parameter(np.zeros((4, 3)))}, arrays, strict=False)
