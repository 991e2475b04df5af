"""Dense 2-D float64 tensors with a tape-based reverse-mode autodiff.

Every operation takes and returns :class:`Tensor` objects.  When a
:class:`Tape` is active (``with Tape() as tape:``) each operation appends a
node holding its inputs, its output and a local gradient rule; ``backward``
walks the nodes in reverse recording order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "GradResult",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "hadamard",
    "abs_elem",
    "add",
    "sub",
    "scale",
    "add_scalar",
    "broadcast_row",
    "broadcast_col",
    "transpose",
    "sum_all",
    "relu",
    "gelu",
    "softmax_rows",
    "layer_norm_cols",
    "mse",
    "cross_entropy",
    "backward",
    "custom",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_ids = itertools.count()


class Tensor:
    """Immutable-by-convention 2-D array of doubles.

    Optimizers swap ``data`` for a fresh array between steps; operations never
    write into an input's buffer.
    """

    __slots__ = ("id", "data", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"Tensor must be a non-empty matrix, got shape {arr.shape}")
        self.id = next(_ids)
        self.data = arr
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def tensor(data, name: str | None = None) -> Tensor:
    return Tensor(data, name=name)


def zeros(rows: int, cols: int, name: str | None = None) -> Tensor:
    return Tensor(np.zeros((rows, cols)), name=name)


def ones(rows: int, cols: int, name: str | None = None) -> Tensor:
    return Tensor(np.ones((rows, cols)), name=name)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

GradRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: GradRule


@dataclass(eq=False)
class Tape:
    nodes: list[Node] = field(default_factory=list)
    values: dict[int, Tensor] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, rule: GradRule) -> None:
        for t in inputs:
            self.values.setdefault(t.id, t)
        self.values[output.id] = output
        self.nodes.append(Node(inputs, output, rule))

    def __contains__(self, t: Tensor | int) -> bool:
        key = t.id if isinstance(t, Tensor) else t
        return key in self.values


_active: list[Tape] = []


def _record(inputs: tuple[Tensor, ...], out: Tensor, rule: GradRule) -> Tensor:
    if _active:
        _active[-1].record(inputs, out, rule)
    return out


def custom(inputs: Sequence[Tensor], data: np.ndarray, rule: GradRule) -> Tensor:
    """Wrap ``data`` as the output of a user-defined op.

    ``rule`` maps the output gradient to one gradient (or None) per input.
    """
    return _record(tuple(inputs), Tensor(data), rule)


class GradResult:
    """Gradients keyed by tensor id; index with a Tensor or its id."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self.grads = grads

    def __getitem__(self, t: Tensor | int) -> np.ndarray:
        key = t.id if isinstance(t, Tensor) else t
        try:
            return self.grads[key]
        except KeyError:
            raise KeyError(f"no gradient recorded for tensor {t!r}") from None

    def get(self, t: Tensor | int, default=None):
        key = t.id if isinstance(t, Tensor) else t
        return self.grads.get(key, default)

    def __contains__(self, t: Tensor | int) -> bool:
        key = t.id if isinstance(t, Tensor) else t
        return key in self.grads

    def __len__(self) -> int:
        return len(self.grads)


def backward(tape: Tape, loss: Tensor | int) -> GradResult:
    """Reverse pass from a 1x1 ``loss`` recorded on ``tape``.

    Gradients of every tensor that the loss depends on are returned; fan-out
    contributions are summed.
    """
    loss_id = loss.id if isinstance(loss, Tensor) else loss
    if loss_id not in tape.values:
        raise KeyError(f"tensor id {loss_id} is not on the tape")
    loss_t = tape.values[loss_id]
    if loss_t.shape != (1, 1):
        raise ValueError(f"backward needs a scalar (1x1) loss, got shape {loss_t.shape}")

    grads: dict[int, np.ndarray] = {loss_id: np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g_out = grads.get(node.output.id)
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.rule(g_out)):
            if g is None:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + g
            else:
                grads[inp.id] = g
    return GradResult(grads)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = Tensor(A @ B)
    return _record((a, b), out, lambda g: (g @ B.T, A.T @ g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)
    A, B = a.data, b.data
    out = Tensor(A * B)
    return _record((a, b), out, lambda g: (g * B, g * A))


def abs_elem(a: Tensor) -> Tensor:
    sign = np.sign(a.data)  # sign(0) == 0
    out = Tensor(np.abs(a.data))
    return _record((a,), out, lambda g: (g * sign,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return _record((a, b), out, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record((a, b), out, lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    return _record((a,), out, lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + float(c))
    return _record((a,), out, lambda g: (g,))


def broadcast_row(c: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of the 1 x k row ``c``."""
    if c.rows != 1:
        raise ShapeError(f"broadcast_row expects a 1 x k tensor, got {c.shape}")
    if n < 1:
        raise ValueError(f"broadcast_row: n must be positive, got {n}")
    out = Tensor(np.repeat(c.data, n, axis=0))
    return _record((c,), out, lambda g: (g.sum(axis=0, keepdims=True),))


def broadcast_col(r: Tensor, k: int) -> Tensor:
    """Place ``k`` copies of the n x 1 column ``r`` side by side."""
    if r.cols != 1:
        raise ShapeError(f"broadcast_col expects an n x 1 tensor, got {r.shape}")
    if k < 1:
        raise ValueError(f"broadcast_col: k must be positive, got {k}")
    out = Tensor(np.repeat(r.data, k, axis=1))
    return _record((r,), out, lambda g: (g.sum(axis=1, keepdims=True),))


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T)
    return _record((a,), out, lambda g: (g.T,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    out = Tensor(a.data.sum())
    return _record((a,), out, lambda g: (np.full(shape, g[0, 0]),))


def relu(a: Tensor) -> Tensor:
    on = (a.data > 0).astype(np.float64)
    out = Tensor(a.data * on)
    return _record((a,), out, lambda g: (g * on,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + th))
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    local = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * d_inner
    return _record((a,), out, lambda g: (g * local,))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(a: Tensor) -> Tensor:
    p = _softmax(a.data)
    out = Tensor(p)

    def rule(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record((a,), out, rule)


def layer_norm_cols(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each column of a d x m tensor over its d entries.

    ``gamma`` and ``beta`` are d x 1.
    """
    d = x.rows
    if gamma.shape != (d, 1) or beta.shape != (d, 1):
        raise ShapeError(
            f"layer_norm_cols: gamma/beta must be ({d}, 1), got {gamma.shape} and {beta.shape}"
        )
    X = x.data
    mu = X.mean(axis=0, keepdims=True)
    xc = X - mu
    var = (xc**2).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gamma.data
    out = Tensor(G * xhat + beta.data)

    def rule(g):
        dxhat = g * G
        dx = inv * (dxhat - dxhat.mean(axis=0, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=0, keepdims=True))
        dgamma = (g * xhat).sum(axis=1, keepdims=True)
        dbeta = g.sum(axis=1, keepdims=True)
        return dx, dgamma, dbeta

    return _record((x, gamma, beta), out, rule)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all entries."""
    _same_shape("mse", pred, target)
    diff = pred.data - target.data
    n = diff.size
    out = Tensor(np.mean(diff**2))
    return _record((pred, target), out, lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))


def cross_entropy(logits: Tensor, labels: Iterable[int]) -> Tensor:
    """Mean softmax cross-entropy; row i of ``logits`` scores sample i."""
    labels = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels)
    m, c = logits.shape
    if labels.shape != (m,):
        raise ShapeError(f"cross_entropy: expected {m} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(m)
    out = Tensor(np.mean(logsum - z[rows, labels]))
    p = _softmax(logits.data)

    def rule(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (g * d / m,)

    return _record((logits,), out, rule)
