"""Transformer building blocks shared by the backbones and the sequence encoder."""
from __future__ import annotations

import math

import numpy as np

from .tensor import (
    Tensor,
    dropout,
    gelu,
    layernorm,
    matmul,
    parameter,
    reshape,
    softmax,
    transpose,
)

BLOCK_PARAM_NAMES = (
    "ln1.g", "ln1.b",
    "attn.q.w", "attn.q.b", "attn.k.w", "attn.k.b",
    "attn.v.w", "attn.v.b", "attn.o.w", "attn.o.b",
    "ln2.g", "ln2.b",
    "mlp.fc1.w", "mlp.fc1.b", "mlp.fc2.w", "mlp.fc2.b",
)

MLP_RATIO = 4


def block_param_shapes(d: int) -> dict[str, tuple]:
    m = MLP_RATIO * d
    return {
        "ln1.g": (d,), "ln1.b": (d,),
        "attn.q.w": (d, d), "attn.q.b": (d,),
        "attn.k.w": (d, d), "attn.k.b": (d,),
        "attn.v.w": (d, d), "attn.v.b": (d,),
        "attn.o.w": (d, d), "attn.o.b": (d,),
        "ln2.g": (d,), "ln2.b": (d,),
        "mlp.fc1.w": (d, m), "mlp.fc1.b": (m,),
        "mlp.fc2.w": (m, d), "mlp.fc2.b": (d,),
    }


def block_param_count(d: int) -> int:
    """Closed form: 4(d^2 + d) attention + 2*m*d + m + d MLP + 4d layer norms."""
    m = MLP_RATIO * d
    return 4 * (d * d + d) + 2 * m * d + m + d + 4 * d


def is_bias(name: str) -> bool:
    return name.endswith(".b")


def init_block(rng: np.random.Generator, d: int, trainable=False, prefix="") -> dict[str, Tensor]:
    params = {}
    for name, shape in block_param_shapes(d).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        params[name] = parameter(arr, trainable=trainable, name=prefix + name)
    return params


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: Tensor | None = None) -> Tensor:
    """Multi-head scaled dot-product attention on (N, S, D) inputs."""
    n, s, d = q.shape
    dh = d // heads

    def split(t):
        return transpose(reshape(t, (n, s, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    probs = softmax(scores)
    ctx = matmul(probs, vh)
    return reshape(transpose(ctx, (0, 2, 1, 3)), (n, s, d))


def transformer_block(
    p: dict[str, Tensor],
    x: Tensor,
    heads: int,
    mask: Tensor | None = None,
    hooks: dict | None = None,
    drop: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-LN block: x + Attn(LN(x)), then + MLP(LN(x)).

    ``hooks`` may carry ``lora_q``/``lora_v`` (added to the query/value
    projections) and ``adapter_attn``/``adapter_mlp`` (applied to the
    sub-layer output before the residual add).
    """
    hooks = hooks or {}
    h = layernorm(x, p["ln1.g"], p["ln1.b"])
    q = linear(h, p["attn.q.w"], p["attn.q.b"])
    k = linear(h, p["attn.k.w"], p["attn.k.b"])
    v = linear(h, p["attn.v.w"], p["attn.v.b"])
    if "lora_q" in hooks:
        q = q + hooks["lora_q"](h)
    if "lora_v" in hooks:
        v = v + hooks["lora_v"](h)
    a = linear(attention(q, k, v, heads, mask), p["attn.o.w"], p["attn.o.b"])
    if "adapter_attn" in hooks:
        a = hooks["adapter_attn"](a)
    if drop > 0.0:
        a = dropout(a, drop, rng)
    x = x + a
    h = layernorm(x, p["ln2.g"], p["ln2.b"])
    m = linear(gelu(linear(h, p["mlp.fc1.w"], p["mlp.fc1.b"])), p["mlp.fc2.w"], p["mlp.fc2.b"])
    if "adapter_mlp" in hooks:
        m = hooks["adapter_mlp"](m)
    if drop > 0.0:
        m = dropout(m, drop, rng)
    return x + m
