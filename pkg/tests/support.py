"""Shared helpers for the test suite: finite differences and toy fixtures."""
import numpy as np

from iisan import data
from iisan.backbone import EncoderConfig
from iisan.recsys import SeqEncoderConfig

ACCEPTANCE_LINES: list[str] = []

FD_EPS = 1e-6
GRAD_RTOL = 1e-4


def rel_error(analytic, numeric) -> float:
    """Norm-wise relative error; two all-zero vectors agree exactly."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(f, arr: np.ndarray, index, eps=FD_EPS) -> float:
    """Central difference of scalar ``f()`` w.r.t. ``arr[index]`` (mutated in place)."""
    old = arr[index]
    arr[index] = old + eps
    hi = f()
    arr[index] = old - eps
    lo = f()
    arr[index] = old
    return (hi - lo) / (2 * eps)


def sample_indices(rng, shape, k):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(k, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def toy_encoders(layers=4, dim=32, heads=2, seed=0):
    return {
        m: EncoderConfig(modality=m, layers=layers, hidden_dim=dim, heads=heads, seed=seed)
        for m in ("text", "image")
    }


def toy_seq(**kw):
    return SeqEncoderConfig(**kw)


def small_dataset(users=60, items=40, seed=3):
    return data.generate(data.GenSpec(num_users=users, num_items=items, seed=seed, max_len=8))


METHODS = ("fft", "adapter", "lora", "bitfit", "iisan", "iisan_cached")


def build_toy_method(name, items, cache_path=None, seed=0):
    """A method at L=4, d=32, rank/bottleneck 8, with every trainable tensor
    perturbed away from its (often zero) initialization."""
    from iisan.backbone import FrozenEncoder
    from iisan.baselines import MethodConfig, build_method
    from iisan.cache import build_cache, open_cache
    from iisan.recsys import SeqEncoder

    enc = toy_encoders()
    cache = None
    if name == "iisan_cached":
        build_cache({m: FrozenEncoder(c) for m, c in enc.items()}, items,
                    range(1, items.num_items + 1), cache_path)
        cache = open_cache(cache_path, enc["text"], enc["image"])
    cfg = MethodConfig(method=name, adapter_bottleneck=8, lora_rank=8)
    method = build_method(cfg, enc, SeqEncoder(toy_seq()), items=items, cache=cache)
    rng = np.random.default_rng(seed)
    for t in method.trainable.values():
        t.data = t.data + 0.05 * rng.normal(size=t.shape)
    return method


def end_to_end_grad_error(method, splits, batch_users=4, per_tensor=2, seed=0):
    """Norm-wise relative error between tape gradients and central
    differences over sampled coordinates of every trainable tensor."""
    from iisan.recsys import forward_batch, make_batch, trainable_users
    from iisan.tensor import Tape

    users = trainable_users(splits.train)[:batch_users]
    batch = make_batch(users, splits.train, splits.popularity, method.seq_encoder.config.max_len)
    with Tape() as tape:
        loss = forward_batch(method, batch, training=False)
    grads = tape.backward(loss)

    def value():
        return forward_batch(method, batch, training=False).item()

    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    for t in method.trainable.values():
        for idx in sample_indices(rng, t.shape, per_tensor):
            analytic.append(grads[t][idx])
            numeric.append(numeric_grad(value, t.data, idx))
    return rel_error(np.array(analytic), np.array(numeric)), len(analytic)
