"""Training-time / parameter / memory efficiency: TPME, measurement and cost model."""
from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class CostSample:
    method: str
    t: float  # seconds per epoch
    p: int  # trainable parameters
    m: float  # peak memory, bytes

    def __post_init__(self):
        if self.t < 0 or self.p < 0 or self.m < 0:
            raise ConfigError(f"cost sample for {self.method!r} has a negative field")


@dataclass(frozen=True)
class TpmeWeights:
    time: float = 0.45
    params: float = 0.10
    memory: float = 0.45

    def __post_init__(self):
        ws = (self.time, self.params, self.memory)
        if any(not 0.0 <= w <= 1.0 for w in ws):
            raise ConfigError(f"TPME weights must lie in [0, 1], got {ws}")
        if abs(sum(ws) - 1.0) > 1e-9:
            raise ConfigError(f"TPME weights must sum to 1, got {sum(ws)!r}")


def minmax(values) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant axis maps to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def tpme(samples, weights: TpmeWeights = TpmeWeights()) -> dict[str, float]:
    """Weighted sum of per-axis min-max normalized costs, in percent."""
    samples = list(samples)
    if len(samples) < 2:
        raise ConfigError("TPME compares at least two methods")
    names = [s.method for s in samples]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate method labels in TPME input")
    score = (
        weights.time * minmax([s.t for s in samples])
        + weights.params * minmax([s.p for s in samples])
        + weights.memory * minmax([s.m for s in samples])
    )
    return {n: float(100.0 * x) for n, x in zip(names, score)}


# ---------------------------------------------------------------------------
# measurement


@dataclass(frozen=True)
class MemoryBreakdown:
    weights_bytes: int
    grad_bytes: int
    optimizer_bytes: int
    activation_bytes: int

    @property
    def total(self) -> int:
        return self.weights_bytes + self.grad_bytes + self.optimizer_bytes + self.activation_bytes


def memory_breakdown(method, optimizer, grad_bytes: int, activation_bytes: int) -> MemoryBreakdown:
    """Assemble the four resident components from tracked allocations.

    ``weights_bytes`` counts every parameter the method keeps resident; a
    cached IISAN run holds no backbone weights at all.
    """
    return MemoryBreakdown(
        weights_bytes=method.resident_weight_bytes(),
        grad_bytes=int(grad_bytes),
        optimizer_bytes=optimizer.moment_bytes,
        activation_bytes=int(activation_bytes),
    )


def measure_epoch(stats, method, optimizer) -> tuple[CostSample, MemoryBreakdown]:
    """Cost triple from at least three timed epochs (the first is warm-up)."""
    stats = list(stats)
    if len(stats) < 3:
        raise ConfigError(f"need at least 3 timed epochs, got {len(stats)}")
    t = statistics.median(s.wall_time for s in stats[1:])
    breakdown = memory_breakdown(
        method,
        optimizer,
        max(s.grad_bytes for s in stats),
        max(s.peak_retained_bytes for s in stats),
    )
    return CostSample(method.name, t, method.trainable_count(), breakdown.total), breakdown


# ---------------------------------------------------------------------------
# CSV interfaces

SAMPLE_HEADER = ["method", "t_seconds", "params", "mem_bytes"]


def read_samples_csv(path) -> list[CostSample]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SAMPLE_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ConfigError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            try:
                out.append(CostSample(row["method"], float(row["t_seconds"]),
                                      int(float(row["params"])), float(row["mem_bytes"])))
            except ValueError as exc:
                raise ConfigError(f"{path}: bad row {row}: {exc}") from None
    return out


def write_tpme_csv(path, scores: dict[str, float], digest: str = ""):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "tpme_percent", "config_digest"])
        for name, value in scores.items():
            w.writerow([name, f"{value:.2f}", digest])


# ---------------------------------------------------------------------------
# analytic cost model

# A lower-case term is negligible next to its upper-case counterpart.
_PAIRS = {"fp": "FP", "bp": "BP", "wu": "WU", "tp": "TP", "mw": "MW", "a": "A"}
ADAM_FLOPS_PER_PARAM = 10


@dataclass(frozen=True)
class ModelShape:
    layers: int = 4
    dim: int = 32
    heads: int = 2
    text_len: int = 8
    image_len: int = 10
    items: int = 128  # items encoded per training step
    side_bottleneck: int = 8
    side_blocks: int = 2
    adapter_bottleneck: int = 8
    lora_rank: int = 8
    seq_dim: int = 64
    width: int = 8

    def __post_init__(self):
        if min(self.layers, self.dim, self.heads, self.text_len, self.image_len, self.items,
               self.side_bottleneck, self.side_blocks, self.adapter_bottleneck,
               self.lora_rank, self.seq_dim, self.width) <= 0:
            raise ConfigError("model shape parameters must be positive")


@dataclass
class CostRow:
    """Per-method symbolic cost terms with numeric proxies (flops or bytes)."""

    method: str
    time: dict[str, float] = field(default_factory=dict)
    params: dict[str, float] = field(default_factory=dict)
    memory: dict[str, float] = field(default_factory=dict)

    def terms(self, metric: str) -> dict[str, float]:
        return getattr(self, metric)

    def reduced(self, metric: str) -> tuple[str, ...]:
        """Dominant terms after dropping negligible lower-case counterparts."""
        terms = self.terms(metric)
        keep = [k for k in terms if not (k in _PAIRS and _PAIRS[k] in terms)]
        return tuple(sorted(keep, key=_term_order))

    def big_o(self, metric: str) -> str:
        return "O(" + "+".join(self.reduced(metric)) + ")"

    def total(self, metric: str) -> float:
        return float(sum(self.terms(metric).values()))


def _term_order(k):
    order = ["FP", "fp", "BP", "bp", "WU", "wu", "TP", "tp", "MW", "mw", "A", "a"]
    return order.index(k)


def relation(a: CostRow, b: CostRow, metric: str) -> str:
    """'=' when both rows reduce to the same terms, else '>' or '<' by numeric total."""
    if a.reduced(metric) == b.reduced(metric):
        return "="
    return ">" if a.total(metric) > b.total(metric) else "<"


def analytic_cost(shape: ModelShape, method: str) -> CostRow:
    d, L, n = shape.dim, shape.layers, shape.items
    seqs = (shape.text_len, shape.image_len)
    mlp = 4 * d
    block_params = 4 * (d * d + d) + 2 * mlp * d + mlp + 5 * d
    TP = 2 * L * block_params
    FP = sum(n * L * (2 * s * (4 * d * d + 2 * mlp * d) + 4 * s * s * d) for s in seqs)
    A = sum(n * L * shape.width * (s * (10 * d + 2 * mlp) + 2 * shape.heads * s * s) for s in seqs)
    MW = TP * shape.width

    if method == "adapter":
        r = shape.adapter_bottleneck
        tp = 2 * L * 2 * (2 * d * r + r + d)
        fp = sum(n * L * 2 * (4 * s * d * r) for s in seqs)
        a = sum(n * L * 2 * s * (2 * r + d) * shape.width for s in seqs)
    elif method == "lora":
        r = shape.lora_rank
        tp = 2 * L * 2 * (2 * d * r)
        fp = sum(n * L * 2 * (4 * s * d * r) for s in seqs)
        a = sum(n * L * 2 * s * r * shape.width for s in seqs)
    else:
        r, k = shape.side_bottleneck, shape.side_blocks
        tp = 3 * k * (2 * d * r + r + d) + 3 * d * shape.seq_dim
        fp = n * (3 * k * 4 * d * r + 2 * 3 * d * shape.seq_dim)
        a = n * shape.width * (3 * k * (2 * r + 2 * d) + 3 * d)
    mw = tp * shape.width
    wu = ADAM_FLOPS_PER_PARAM * tp
    bp = 2 * fp

    if method == "fft":
        return CostRow(
            method,
            time={"FP": FP, "BP": 2 * FP, "WU": ADAM_FLOPS_PER_PARAM * TP},
            params={"TP": TP},
            memory={"MW": 4 * MW, "A": A},
        )
    if method in ("adapter", "lora"):
        return CostRow(
            method,
            time={"FP": FP, "fp": fp, "BP": FP, "bp": bp, "wu": wu},
            params={"tp": tp},
            memory={"MW": MW, "mw": 4 * mw, "A": A, "a": a},
        )
    if method == "iisan":
        return CostRow(
            method,
            time={"FP": FP, "fp": fp, "bp": bp, "wu": wu},
            params={"tp": tp},
            memory={"MW": MW, "mw": 4 * mw, "a": a},
        )
    if method == "iisan_cached":
        return CostRow(
            method,
            time={"fp": fp, "bp": bp, "wu": wu},
            params={"tp": tp},
            memory={"mw": 4 * mw, "a": a},
        )
    raise ConfigError(f"no cost model for method {method!r}")


def cost_table(shape: ModelShape, methods=("fft", "adapter", "lora", "iisan", "iisan_cached")):
    """Rows plus the relation between each adjacent pair of columns per metric."""
    rows = [analytic_cost(shape, m) for m in methods]
    rel = {
        metric: [relation(a, b, metric) for a, b in zip(rows, rows[1:])]
        for metric in ("time", "params", "memory")
    }
    return rows, rel


def fmt_bytes(n: float) -> str:
    if n <= 0:
        return "0B"
    units = ["B", "KiB", "MiB", "GiB"]
    k = min(int(math.log(n, 1024)), len(units) - 1)
    return f"{n / 1024 ** k:.2f}{units[k]}"
