"""Importance scores: magnitude, movement, and the low-rank + structured PST score.

The PST score of an n x k weight is

    |W0 + beta * U @ V| + alpha1 * A @ B + alpha2 * (R + C)

with ``R`` (n x 1) and ``C`` (1 x k) broadcast across the matrix.  ``U, V, A,
B`` are trained through the tape; ``R`` and ``C`` are running sums of the
negated row/column totals of ``grad * weight``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "ScoreConfig",
    "ScoreState",
    "MvPState",
    "VARIANTS",
    "VARIANT_LABELS",
    "effective_weight",
    "pst_score",
    "score_variant",
    "accumulate_structured",
    "mvp_accumulate",
    "map_score",
    "trainable_param_count",
    "dense_param_count",
]

INIT_STD = 0.02

# (magnitude term, low-rank term, structured term)
VARIANTS: dict[str, tuple[bool, bool, bool]] = {
    "full": (True, True, True),
    "mag+lowrank": (True, True, False),
    "mag+struct": (True, False, True),
    "mag": (True, False, False),
    "lowrank+struct": (False, True, True),
    "lowrank": (False, True, False),
    "struct": (False, False, True),
}

VARIANT_LABELS = {
    "full": "|W0+bUV| + a1*AB + a2*(R+C)",
    "mag+lowrank": "|W0+bUV| + a1*AB",
    "mag+struct": "|W0+bUV| + a2*(R+C)",
    "mag": "|W0+bUV|",
    "lowrank+struct": "a1*AB + a2*(R+C)",
    "lowrank": "a1*AB",
    "struct": "a2*(R+C)",
}


@dataclass
class ScoreConfig:
    alpha1: float = 1.0
    alpha2: float = 1.0
    beta: float = 1.0
    r1: int = 8
    r2: int = 8
    # single trade-off shared by both data-driven terms; only read by the
    # "legacy" score variant
    legacy_alpha: float = 1.0

    def __post_init__(self):
        if self.r1 < 1 or self.r2 < 1:
            raise ValueError(f"ranks must be >= 1, got r1={self.r1}, r2={self.r2}")


@dataclass(eq=False)
class ScoreState:
    w0: np.ndarray
    U: Tensor
    V: Tensor
    A: Tensor
    B: Tensor
    R: np.ndarray
    C: np.ndarray
    config: ScoreConfig = field(default_factory=ScoreConfig)

    @classmethod
    def init(cls, w0: np.ndarray, config: ScoreConfig, rng: np.random.Generator,
             name: str = "") -> "ScoreState":
        w0 = np.array(w0, dtype=np.float64)
        w0.setflags(write=False)
        n, k = w0.shape
        prefix = f"{name}." if name else ""
        return cls(
            w0=w0,
            U=Tensor(rng.normal(0.0, INIT_STD, size=(n, config.r2)), name=prefix + "U"),
            V=T.zeros(config.r2, k, name=prefix + "V"),
            A=Tensor(rng.normal(0.0, INIT_STD, size=(n, config.r1)), name=prefix + "A"),
            B=T.zeros(config.r1, k, name=prefix + "B"),
            R=np.zeros((n, 1)),
            C=np.zeros((1, k)),
            config=config,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.w0.shape


@dataclass(eq=False)
class MvPState:
    S: np.ndarray

    @classmethod
    def init(cls, w_pretrained: np.ndarray) -> "MvPState":
        return cls(S=np.abs(np.asarray(w_pretrained, dtype=np.float64)))


def effective_weight(state: ScoreState) -> Tensor:
    """``W0 + beta * U @ V``; W0 enters as a constant."""
    w0 = Tensor(state.w0)
    return T.add(w0, T.scale(T.matmul(state.U, state.V), state.config.beta))


def _structured_term(state: ScoreState) -> Tensor:
    n, k = state.shape
    r = T.broadcast_col(Tensor(state.R), k)
    c = T.broadcast_row(Tensor(state.C), n)
    return T.scale(T.add(r, c), state.config.alpha2)


def _lowrank_term(state: ScoreState) -> Tensor:
    return T.scale(T.matmul(state.A, state.B), state.config.alpha1)


def score_variant(state: ScoreState, variant: str, eff: Tensor | None = None) -> Tensor:
    """Score built from a subset of the three PST terms.

    ``variant`` is a key of :data:`VARIANTS`, or ``"legacy"`` for the
    single trade-off form ``|W0+bUV| + legacy_alpha * (AB + R + C)``.
    """
    if variant == "legacy":
        eff = effective_weight(state) if eff is None else eff
        n, k = state.shape
        data_driven = T.add(
            T.matmul(state.A, state.B),
            T.add(T.broadcast_col(Tensor(state.R), k), T.broadcast_row(Tensor(state.C), n)),
        )
        return T.add(T.abs_elem(eff), T.scale(data_driven, state.config.legacy_alpha))
    try:
        use_mag, use_lowrank, use_struct = VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown score variant {variant!r}; expected one of "
                         f"{sorted(VARIANTS)}") from None
    terms = []
    if use_mag:
        eff = effective_weight(state) if eff is None else eff
        terms.append(T.abs_elem(eff))
    if use_lowrank:
        terms.append(_lowrank_term(state))
    if use_struct:
        terms.append(_structured_term(state))
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


def pst_score(state: ScoreState, eff: Tensor | None = None) -> Tensor:
    return score_variant(state, "full", eff=eff)


def _check(op: str, expected: tuple[int, int], *arrays: np.ndarray) -> None:
    for a in arrays:
        if a.shape != expected:
            raise ShapeError(f"{op}: expected shape {expected}, got {a.shape}")


def accumulate_structured(state: ScoreState, grad_w: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Add one step's negated row/column sums of ``grad_w * w`` to R and C.

    Returns the (row, column) contributions that were added.
    """
    grad_w = np.asarray(grad_w, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check("accumulate_structured", state.shape, grad_w, w)
    gw = grad_w * w
    dR = -gw.sum(axis=1, keepdims=True)
    dC = -gw.sum(axis=0, keepdims=True)
    state.R = state.R + dR
    state.C = state.C + dC
    return dR, dC


def mvp_accumulate(state: MvPState, grad_w: np.ndarray, w: np.ndarray) -> np.ndarray:
    grad_w = np.asarray(grad_w, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check("mvp_accumulate", state.S.shape, grad_w, w)
    dS = -grad_w * w
    state.S = state.S + dS
    return dS


def map_score(w: Tensor | np.ndarray) -> np.ndarray:
    data = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    return np.abs(data)


def trainable_param_count(n: int, k: int, r1: int, r2: int) -> int:
    """Score + weight-update parameters of one PST layer."""
    return (n + k) * (r1 + r2 + 1)


def dense_param_count(n: int, k: int) -> int:
    """Weight plus full score matrix, as trained by movement pruning."""
    return 2 * n * k
