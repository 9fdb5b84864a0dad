"""Tape-based reverse-mode differentiation over small dense float64 matrices.

Every primitive is a pair of pure numpy kernels registered in ``FORWARD`` and
``BACKWARD``.  A :class:`Tape` records one node per primitive call (a Wengert
list), so the same recording can be differentiated with :func:`backward` or
re-executed with :meth:`Tape.replay`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class TapeStateError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class MaskValueError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "index", "name")

    def __init__(self, value, index=-1, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.index = index
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------- kernels

def attention_forward(q, k, v, mask, scale):
    """Masked softmax attention.  Rows with no attendable key output zeros."""
    scores = (q @ k.T) * scale
    allowed = mask.astype(bool)
    shifted = np.where(allowed, scores, -np.inf)
    row_max = shifted.max(axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(np.where(allowed, scores - row_max, -np.inf))
    denom = e.sum(axis=1, keepdims=True)
    p = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    return p @ v, p


def log_softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _fwd_matmul(a, b, **_):
    return a @ b


def _bwd_matmul(ins, out, g, **_):
    a, b = ins
    return g @ b.T, a.T @ g


def _fwd_add(a, b, **_):
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return a + b


def _bwd_add(ins, out, g, **_):
    return g, g


def _fwd_add_row(a, row, **_):
    if a.ndim != 2 or row.shape != (a.shape[1],):
        raise ShapeError(f"add_row: {a.shape} vs {row.shape}")
    return a + row


def _bwd_add_row(ins, out, g, **_):
    return g, g.sum(axis=0)


def _fwd_mul(a, b, **_):
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    return a * b


def _bwd_mul(ins, out, g, **_):
    a, b = ins
    return g * b, g * a


def _fwd_scale(a, c, **_):
    return a * c


def _bwd_scale(ins, out, g, c, **_):
    return (g * c,)


def _fwd_tanh(a, **_):
    return np.tanh(a)


def _bwd_tanh(ins, out, g, **_):
    return (g * (1.0 - out * out),)


def _fwd_embed(table, ids, **_):
    return table[ids]


def _bwd_embed(ins, out, g, ids, **_):
    grad = np.zeros_like(ins[0])
    np.add.at(grad, ids, g)
    return (grad,)


def _fwd_attention(q, k, v, mask, scale, **_):
    return attention_forward(q, k, v, mask, scale)[0]


def _bwd_attention(ins, out, g, mask, scale, **_):
    q, k, v = ins
    _, p = attention_forward(q, k, v, mask, scale)
    dp = g @ v.T
    dv = p.T @ g
    ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
    dq = (ds @ k) * scale
    dk = (ds.T @ q) * scale
    return dq, dk, dv


def _fwd_log_softmax(a, **_):
    return log_softmax_rows(a)


def _bwd_log_softmax(ins, out, g, **_):
    return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)


def _fwd_softmax(a, **_):
    return np.exp(log_softmax_rows(a))


def _bwd_softmax(ins, out, g, **_):
    return (out * (g - (g * out).sum(axis=1, keepdims=True)),)


def _fwd_gather(a, rows, cols, weights, **_):
    return np.array((a[rows, cols] * weights).sum())


def _bwd_gather(ins, out, g, rows, cols, weights, **_):
    grad = np.zeros_like(ins[0])
    np.add.at(grad, (rows, cols), g * weights)
    return (grad,)


def _fwd_select_rows(a, rows, **_):
    return a[rows]


def _bwd_select_rows(ins, out, g, rows, **_):
    grad = np.zeros_like(ins[0])
    np.add.at(grad, rows, g)
    return (grad,)


def _fwd_sum(a, **_):
    return np.array(a.sum())


def _bwd_sum(ins, out, g, **_):
    return (np.full_like(ins[0], g),)


FORWARD: dict[str, Callable] = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "add_row": _fwd_add_row,
    "mul": _fwd_mul,
    "scale": _fwd_scale,
    "tanh": _fwd_tanh,
    "embed": _fwd_embed,
    "attention": _fwd_attention,
    "log_softmax": _fwd_log_softmax,
    "softmax": _fwd_softmax,
    "gather": _fwd_gather,
    "select_rows": _fwd_select_rows,
    "sum": _fwd_sum,
}

BACKWARD: dict[str, Callable] = {
    "matmul": _bwd_matmul,
    "add": _bwd_add,
    "add_row": _bwd_add_row,
    "mul": _bwd_mul,
    "scale": _bwd_scale,
    "tanh": _bwd_tanh,
    "embed": _bwd_embed,
    "attention": _bwd_attention,
    "log_softmax": _bwd_log_softmax,
    "softmax": _bwd_softmax,
    "gather": _bwd_gather,
    "select_rows": _bwd_select_rows,
    "sum": _bwd_sum,
}


def _check_mask(mask, n_q, n_k):
    mask = np.asarray(mask)
    if mask.shape != (n_q, n_k):
        raise ShapeError(f"mask shape {mask.shape} does not match ({n_q}, {n_k})")
    if not np.isin(mask, (0, 1)).all():
        raise MaskValueError("attention mask entries must be 0 or 1")
    return mask.astype(np.int8)


def forward_masked_attention(query, key, value, mask, scale=None):
    """Standalone masked attention on plain arrays or tensors (no recording)."""
    q, k, v = (np.asarray(getattr(t, "value", t), dtype=np.float64) for t in (query, key, value))
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention operands must be matrices")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    mask = _check_mask(getattr(mask, "matrix", mask), q.shape[0], k.shape[0])
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[1])
    return attention_forward(q, k, v, mask, scale)[0]


class Tape:
    """Records primitive calls.  With ``record=False`` ops run eagerly only."""

    def __init__(self, seed: int = 0, record: bool = True):
        self.seed = seed
        self.record = record
        self.nodes: list[Node | None] = []
        self.values: list[np.ndarray] = []
        self.params: dict[str, int] = {}

    # leaves
    def _leaf(self, value, name=None):
        t = Tensor(value, name=name)
        if self.record:
            t.index = len(self.values)
            self.nodes.append(None)
            self.values.append(t.value)
        return t

    def param(self, name: str, value) -> Tensor:
        t = self._leaf(value, name)
        if self.record:
            self.params[name] = t.index
        return t

    def constant(self, value) -> Tensor:
        return self._leaf(value)

    def _apply(self, op, inputs, **attrs):
        out = FORWARD[op](*(x.value for x in inputs), **attrs)
        t = Tensor(out)
        if self.record:
            t.index = len(self.values)
            self.nodes.append(Node(op, tuple(x.index for x in inputs), attrs))
            self.values.append(t.value)
        return t

    # primitives
    def matmul(self, a, b):
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        return self._apply("matmul", (a, b))

    def add(self, a, b):
        return self._apply("add", (a, b))

    def add_row(self, a, row):
        return self._apply("add_row", (a, row))

    def mul(self, a, b):
        return self._apply("mul", (a, b))

    def scale(self, a, c: float):
        return self._apply("scale", (a,), c=float(c))

    def tanh(self, a):
        return self._apply("tanh", (a,))

    def embed(self, table, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
            raise ShapeError("embedding index out of range")
        return self._apply("embed", (table,), ids=ids)

    def attention(self, q, k, v, mask, scale=None):
        if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
            raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
        mask = _check_mask(mask, q.shape[0], k.shape[0])
        if scale is None:
            scale = 1.0 / np.sqrt(q.shape[1])
        return self._apply("attention", (q, k, v), mask=mask, scale=float(scale))

    def log_softmax(self, a):
        return self._apply("log_softmax", (a,))

    def softmax(self, a):
        return self._apply("softmax", (a,))

    def gather(self, a, rows, cols, weights=None):
        """Weighted sum of selected entries ``a[rows[i], cols[i]]`` -> scalar."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if weights is None:
            weights = np.ones(len(rows))
        return self._apply("gather", (a,), rows=rows, cols=cols,
                           weights=np.asarray(weights, dtype=np.float64))

    def select_rows(self, a, rows):
        return self._apply("select_rows", (a,), rows=np.asarray(rows, dtype=np.int64))

    def sum(self, a):
        return self._apply("sum", (a,))

    def replay(self) -> list[np.ndarray]:
        """Re-execute every recorded node from the stored leaf values."""
        if not self.nodes:
            raise TapeStateError("nothing recorded")
        vals: list[np.ndarray] = []
        for node, stored in zip(self.nodes, self.values):
            if node is None:
                vals.append(stored)
            else:
                vals.append(FORWARD[node.op](*(vals[i] for i in node.inputs), **node.attrs))
        return vals


def backward(tape: Tape, output_gradient=1.0, output: Tensor | None = None) -> dict[str, np.ndarray]:
    """Reverse sweep from ``output`` (default: last recorded node).

    Returns gradients keyed by parameter name; every registered parameter gets
    an entry (zeros when unreachable).  Also fills ``Tensor.grad``-style
    buffers in ``tape.grads`` for non-parameter leaves.
    """
    if not tape.record or not tape.nodes or tape.nodes[-1] is None:
        raise TapeStateError("backward requires a recorded forward pass")
    start = len(tape.nodes) - 1 if output is None else output.index
    if start < 0:
        raise TapeStateError("output tensor is not on this tape")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    seed = np.asarray(output_gradient, dtype=np.float64)
    grads[start] = np.broadcast_to(seed, tape.values[start].shape).astype(np.float64)
    for idx in range(start, -1, -1):
        node = tape.nodes[idx]
        g = grads[idx]
        if node is None or g is None:
            continue
        ins = [tape.values[i] for i in node.inputs]
        for i, gi in zip(node.inputs, BACKWARD[node.op](ins, tape.values[idx], g, **node.attrs)):
            grads[i] = gi if grads[i] is None else grads[i] + gi
    tape.grads = grads
    return {
        name: (grads[i] if grads[i] is not None else np.zeros_like(tape.values[i]))
        for name, i in tape.params.items()
    }
