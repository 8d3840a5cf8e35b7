"""Sequence encoder, in-batch debiased training and leave-one-out evaluation."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, DataError
from .nn import block_param_count, init_block, transformer_block
from .tensor import (
    Tape,
    Tensor,
    concat,
    debiased_ce,
    embed_lookup,
    layernorm,
    matmul,
    parameter,
    transpose,
)

MASK_NEG = -1e9


@dataclass(frozen=True)
class SeqEncoderConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 2
    max_len: int = 10
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"seq dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


def seq_encoder_param_count(cfg: SeqEncoderConfig) -> int:
    return cfg.max_len * cfg.dim + cfg.layers * block_param_count(cfg.dim) + 2 * cfg.dim


class SeqEncoder:
    """Causal transformer over item embeddings with learned positions."""

    def __init__(self, config: SeqEncoderConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 202])
        d = config.dim
        self.params: dict[str, Tensor] = {
            "pos": parameter(rng.normal(0, 0.1, (config.max_len, d)), name="seq.pos")
        }
        self.blocks = []
        for i in range(config.layers):
            block = init_block(rng, d, trainable=True, prefix=f"seq.blocks.{i}.")
            self.blocks.append(block)
            for name, t in block.items():
                self.params[f"blocks.{i}.{name}"] = t
        self.params["ln_f.g"] = parameter(np.ones(d), name="seq.ln_f.g")
        self.params["ln_f.b"] = parameter(np.zeros(d), name="seq.ln_f.b")

    def __call__(self, item_emb: Tensor, inputs: np.ndarray, training=False, rng=None) -> Tensor:
        """Encode left-padded sequences.

        item_emb: (C, D) candidate embeddings; inputs: (B, n) column indices
        into item_emb, with C marking padding. Returns (B, n, D) states.
        """
        b, n = inputs.shape
        c, d = item_emb.shape
        if n > self.config.max_len:
            raise DataError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        padded = concat([item_emb, Tensor(np.zeros((1, d)))], axis=0)
        x = embed_lookup(padded, inputs) + self.params["pos"][:n]
        drop = self.config.dropout if training else 0.0
        if drop > 0.0 and rng is None:
            raise ConfigError("dropout needs an rng during training")
        mask = Tensor(attention_mask(inputs != c))
        for block in self.blocks:
            x = transformer_block(block, x, self.config.heads, mask=mask, drop=drop, rng=rng)
        return layernorm(x, self.params["ln_f.g"], self.params["ln_f.b"])


def attention_mask(real: np.ndarray) -> np.ndarray:
    """Additive (B, 1, n, n) mask: causal, padding keys hidden, self always visible."""
    b, n = real.shape
    causal = np.tril(np.ones((n, n), dtype=bool))
    allowed = causal[None] & (real[:, None, :] | np.eye(n, dtype=bool)[None])
    return np.where(allowed, 0.0, MASK_NEG)[:, None, :, :]


def score(user_state, item_embedding) -> float:
    """Dot-product relevance of one user state and one item embedding."""
    u = np.asarray(user_state, dtype=np.float64)
    v = np.asarray(item_embedding, dtype=np.float64)
    if u.shape != v.shape:
        raise ConfigError(f"score: dimension mismatch {u.shape} vs {v.shape}")
    return float(u @ v)


# ---------------------------------------------------------------------------
# batches and loss


@dataclass
class Batch:
    users: np.ndarray
    candidates: np.ndarray  # (C,) item ids
    inputs: np.ndarray  # (B, n) column in candidates, C = pad
    targets: np.ndarray  # (B, n) column in candidates
    valid: np.ndarray  # (B, n) bool
    admit: np.ndarray  # (B, C) bool, candidate not interacted by the user
    logp: np.ndarray  # (C,)


def make_batch(users, train_seqs, popularity, max_len: int) -> Batch:
    """Next-item batch over each user's most recent ``max_len + 1`` training items."""
    users = np.asarray(users)
    seqs = [np.asarray(train_seqs[u])[-(max_len + 1):] for u in users]
    candidates = np.unique(np.concatenate(seqs)) if seqs else np.zeros(0, dtype=np.int64)
    col = {int(i): j for j, i in enumerate(candidates)}
    c = len(candidates)
    b = len(users)
    inputs = np.full((b, max_len), c, dtype=np.int64)
    targets = np.zeros((b, max_len), dtype=np.int64)
    valid = np.zeros((b, max_len), dtype=bool)
    admit = np.ones((b, c), dtype=bool)
    for r, (u, s) in enumerate(zip(users, seqs)):
        k = len(s) - 1
        if k > 0:
            inputs[r, max_len - k:] = [col[int(i)] for i in s[:-1]]
            targets[r, max_len - k:] = [col[int(i)] for i in s[1:]]
            valid[r, max_len - k:] = True
        seen = [col[int(i)] for i in np.unique(train_seqs[u]) if int(i) in col]
        admit[r, seen] = False
    return Batch(users, candidates, inputs, targets, valid, admit, popularity.logp(candidates))


def debiased_ce_loss(scores: Tensor, batch: Batch) -> Tensor:
    """Mean over (user, position) of -log softmax with logits score - log p.

    The softmax runs over the target plus every batch item outside the
    user's interaction set.
    """
    if np.any(~np.isfinite(batch.logp)):
        raise DataError("popularity must be positive for every batch item")
    return debiased_ce(scores, batch.logp, batch.targets, batch.valid, batch.admit)


def reference_debiased_ce(scores, logp, targets, valid, admit) -> float:
    """Scalar-loop version of the loss, kept independent of the kernels."""
    total, count = 0.0, 0
    b, n, c = scores.shape
    for u in range(b):
        for i in range(n):
            if not valid[u, i]:
                continue
            t = targets[u, i]
            cand = [j for j in range(c) if j == t or admit[u, j]]
            logits = [scores[u, i, j] - logp[j] for j in cand]
            top = max(logits)
            lse = top + math.log(sum(math.exp(z - top) for z in logits))
            total += lse - (scores[u, i, t] - logp[t])
            count += 1
    return total / count


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    loss: float
    wall_time: float
    peak_retained_bytes: int
    tape_nodes: int = 0
    batches: int = 0
    grad_bytes: int = 0


def forward_batch(method, batch: Batch, training: bool, rng=None) -> Tensor:
    emb = method.embed_items(batch.candidates)
    states = method.seq_encoder(emb, batch.inputs, training=training, rng=rng)
    scores = matmul(states, transpose(emb, (1, 0)))
    return debiased_ce_loss(scores, batch)


def trainable_users(train_seqs) -> np.ndarray:
    return np.array([u for u in sorted(train_seqs) if len(train_seqs[u]) >= 2], dtype=np.int64)


def train_epoch(method, splits, optimizer, batch_size: int, epoch: int, seed: int,
                saving: str = "graph") -> EpochStats:
    """One pass over training users in a seeded shuffled order."""
    if getattr(method, "needs_cache", False) and method.source is None:
        raise ConfigError("cached method has no cache attached")
    rng = np.random.default_rng([seed, epoch, 303])
    users = trainable_users(splits.train)
    order = users[rng.permutation(len(users))]
    start = time.perf_counter()
    total, batches, peak, nodes, gbytes = 0.0, 0, 0, 0, 0
    for lo in range(0, len(order), batch_size):
        batch = make_batch(order[lo:lo + batch_size], splits.train, splits.popularity,
                           method.seq_encoder.config.max_len)
        with Tape(saving) as tape:
            loss = forward_batch(method, batch, training=True, rng=rng)
        peak = max(peak, tape.peak_retained_bytes)
        nodes = max(nodes, len(tape.nodes))
        grads = tape.backward(loss)
        gbytes = max(gbytes, sum(g.nbytes for g in grads.values()))
        optimizer.step(grads)
        total += loss.item()
        batches += 1
    wall = time.perf_counter() - start
    return EpochStats(epoch, total / max(batches, 1), wall, peak, nodes, batches, gbytes)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    hr10: float
    ndcg10: float
    ranks: np.ndarray = field(repr=False)
    split: str = "test"

    def __post_init__(self):
        assert 0.0 <= self.ndcg10 <= self.hr10 <= 1.0


def metrics_from_ranks(ranks, split="test", k=10) -> EvalReport:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise DataError(f"split {split!r} is empty")
    hit = ranks <= k
    gains = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
    return EvalReport(float(hit.mean()), float(gains.mean()), ranks, split)


def rank_scores(scores: np.ndarray, target_ids: np.ndarray) -> np.ndarray:
    """Ranks of targets in (U, V) score rows whose column j holds item j+1."""
    return kernels.rank_targets(np.ascontiguousarray(scores, dtype=np.float64),
                                np.asarray(target_ids) - 1)


def all_item_embeddings(method, num_items: int, chunk: int = 256) -> np.ndarray:
    ids = np.arange(1, num_items + 1)
    parts = [method.embed_items(ids[lo:lo + chunk]).data for lo in range(0, len(ids), chunk)]
    return np.concatenate(parts, axis=0)


def user_states(method, item_emb: np.ndarray, contexts, chunk: int = 256) -> np.ndarray:
    """Last-position sequence-encoder state for each context (item ids)."""
    n = method.seq_encoder.config.max_len
    v = item_emb.shape[0]
    emb = Tensor(item_emb)
    out = []
    for lo in range(0, len(contexts), chunk):
        rows = contexts[lo:lo + chunk]
        inputs = np.full((len(rows), n), v, dtype=np.int64)
        for r, ctx in enumerate(rows):
            ctx = np.asarray(ctx)[-n:]
            inputs[r, n - len(ctx):] = ctx - 1
        out.append(method.seq_encoder(emb, inputs, training=False).data[:, -1, :])
    return np.concatenate(out, axis=0)


def evaluate(method, splits, split: str = "test") -> EvalReport:
    """Rank each user's held-out item against the entire item set."""
    if split not in ("valid", "test"):
        raise ConfigError(f"unknown split {split!r}")
    contexts, targets = getattr(splits, split)
    if len(targets) == 0:
        raise DataError(f"split {split!r} is empty")
    item_emb = all_item_embeddings(method, splits.num_items)
    states = user_states(method, item_emb, contexts)
    return metrics_from_ranks(rank_scores(states @ item_emb.T, targets), split)


def evaluate_scores(scores: np.ndarray, targets, split="test") -> EvalReport:
    """Report for an arbitrary (U, V) score matrix, e.g. a popularity ranker."""
    return metrics_from_ranks(rank_scores(scores, np.asarray(targets)), split)


REPORT_HEADER = ["method", "split", "HR@10", "NDCG@10", "seed", "config_digest"]


def write_report_csv(path, rows):
    """rows: iterable of (method, EvalReport, seed, digest)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for method, rep, seed, digest in rows:
            w.writerow([method, rep.split, f"{rep.hr10:.6f}", f"{rep.ndcg10:.6f}", seed, digest])
