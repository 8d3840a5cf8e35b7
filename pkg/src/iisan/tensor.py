"""Dense tensors with a tape-based reverse-mode differentiation engine.

Operations record a node on the active :class:`Tape` only when at least one
input requires a gradient, so a forward pass through frozen weights leaves
no trace on the tape. Every node also registers the arrays it keeps alive
for its backward pass; the tape's ``retained_bytes`` is therefore a direct
measurement of activation memory.

Typical use::

    with Tape() as tape:
        loss = model(x)
    grads = tape.backward(loss)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operands of an op do not have conforming shapes."""


class TapeError(RuntimeError):
    """Misuse of the tape (consumed tape, non-scalar loss, untaped loss)."""


_ACTIVE: list["Tape"] = []
SAVING_POLICIES = ("graph", "minimal")


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name", "is_param")

    def __init__(self, data, requires_grad=False, name=None, dtype=np.float64, is_param=False):
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name
        self.is_param = is_param

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def nbytes(self):
        return self.data.nbytes

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def parameter(data, trainable=True, name=None, dtype=np.float64):
    """A leaf tensor owned by a model (counted as weights, never as activations)."""
    return Tensor(data, requires_grad=trainable, name=name, dtype=dtype, is_param=True)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


@dataclass(frozen=True)
class TapeStats:
    node_count: int
    retained_bytes: int


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    ``saving`` sets what a recorded op retains. Under ``"graph"`` every op
    keeps the forward values its backward rule reads, whichever inputs need
    gradients, so retained bytes track the size of the taped graph. Under
    ``"minimal"`` an op keeps only what the gradients actually requested
    need (a frozen weight's matmul drops its input).
    """

    def __init__(self, saving: str = "graph"):
        if saving not in SAVING_POLICIES:
            raise ValueError(f"unknown saving policy {saving!r}; expected one of {SAVING_POLICIES}")
        self.saving = saving
        self.nodes: list[Node] = []
        self._saved: dict[int, np.ndarray] = {}
        self.retained_bytes = 0
        self.peak_retained_bytes = 0
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def _record(self, node, saved, saved_if=()):
        self.nodes.append(node)
        extra = [t for t, needed in saved_if if needed or self.saving == "graph"]
        for item in (*saved, *extra):
            if isinstance(item, Tensor):
                if item.is_param:
                    continue
                item = item.data
            key = id(item)
            if key not in self._saved:
                self._saved[key] = item
                self.retained_bytes += item.nbytes
        if self.retained_bytes > self.peak_retained_bytes:
            self.peak_retained_bytes = self.retained_bytes

    def stats(self) -> TapeStats:
        return TapeStats(len(self.nodes), self.retained_bytes)

    def backward(self, loss: Tensor) -> dict:
        """Reverse-accumulate d loss / d t for every requires-grad leaf t.

        Returns a map from leaf tensor to gradient array. The tape is consumed.
        """
        if self.consumed:
            raise TapeError("backward() called twice on the same tape")
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss.node is None or not loss.requires_grad:
            raise TapeError("loss was not produced by a taped forward pass")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp.node is None:
                    leaves[key] = inp
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        self.consumed = True
        for node in self.nodes:
            node.backward = None
            node.output.node = None
        self._saved.clear()
        self.retained_bytes = 0
        return {t: grads[k] for k, t in leaves.items()}


def active_tape():
    return _ACTIVE[-1] if _ACTIVE else None


def backward(loss: Tensor, tape: Tape | None = None) -> dict:
    """Backward through ``tape`` (default: the innermost active tape)."""
    tape = tape or active_tape()
    if tape is None:
        raise TapeError("no tape to run backward on")
    return tape.backward(loss)


def tape_stats(tape: Tape) -> TapeStats:
    return tape.stats()


def _emit(op: str, data, inputs: Sequence[Tensor], grad_fn: Callable, saved=(), saved_if=()):
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, grad_fn)
        out.node = node
        tape._record(node, saved, saved_if)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from None

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), grad_fn, saved_if=((b, a.requires_grad), (a, b.requires_grad)))


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    out = a.data + b.data

    def grad_fn(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit("add", out, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    out = a.data - b.data

    def grad_fn(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _emit("sub", out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _emit("mul", out, (a, b), grad_fn, saved_if=((b, a.requires_grad), (a, b.requires_grad)))


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    return _emit("scale", out, (a,), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: shapes {shapes} do not conform on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _emit("concat", out, tensors, grad_fn)


def slice_(a: Tensor, index) -> Tensor:
    out = np.ascontiguousarray(a.data[index])

    def grad_fn(g):
        full = np.zeros_like(a.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _emit("slice", out, (a,), grad_fn)


def _is_fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _emit("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", out, (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (a,), grad_fn, (y,))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: shapes {x.shape} and {gamma.shape} do not conform")
    flat = x.data.reshape(-1, d)
    y, xhat, rstd = kernels.layernorm_forward(flat, gamma.data, beta.data, eps)

    def grad_fn(g):
        gx, gg, gb = kernels.layernorm_backward(g.reshape(-1, d), xhat, rstd, gamma.data)
        return (
            gx.reshape(x.shape) if x.requires_grad else None,
            gg if gamma.requires_grad else None,
            gb if beta.requires_grad else None,
        )

    return _emit("layernorm", y.reshape(x.shape), (x, gamma, beta), grad_fn, (xhat, rstd))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    out = kernels.gelu_forward(a.data)
    return _emit("gelu", out, (a,), lambda g: (kernels.gelu_backward(a.data, g),), (a,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)
    return _emit("relu", out, (a,), lambda g: (g * mask,), (mask,))


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),), (y,))


def embed_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (V, D) at integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embed_lookup: table shape {table.shape} is not 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embed_lookup: ids out of range for table shape {table.shape} (ids shape {ids.shape})"
        )
    out = table.data[ids]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit("embed_lookup", out, (table,), grad_fn, (ids,))


def debiased_ce(scores: Tensor, logp, targets, valid, admit) -> Tensor:
    """Mean popularity-debiased in-batch cross-entropy over valid positions.

    ``scores`` is (B, P, C) against the C batch candidates. A candidate j is
    admitted for user b when ``admit[b, j]`` is set; the target column is
    always admitted. Logits are ``score - log p``.
    """
    logp = np.asarray(logp, dtype=np.float64)
    if scores.ndim != 3 or logp.shape != (scores.shape[2],):
        raise ShapeError(f"debiased_ce: shapes {scores.shape} and {logp.shape} do not conform")
    total, count, grad = kernels.debiased_ce(scores.data, logp, targets, valid, admit)
    if count == 0:
        raise ValueError("debiased_ce: batch has no valid prediction positions")
    out = np.asarray(total / count)
    grad = grad / count
    return _emit("debiased_ce", out, (scores,), lambda g: (g * grad,), (grad,))


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout implemented as a multiply by a fixed random mask."""
    if p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, Tensor(keep))


OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "concat": concat,
    "slice": slice_,
    "transpose": transpose,
    "reshape": reshape,
    "sum": sum_,
    "softmax": softmax,
    "layernorm": layernorm,
    "gelu": gelu,
    "relu": relu,
    "sigmoid": sigmoid,
    "embed_lookup": embed_lookup,
    "debiased_ce": debiased_ce,
}
