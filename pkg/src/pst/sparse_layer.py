"""Masked linear layer with per-step top-v masks and a straight-through score path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .importance import (
    VARIANTS,
    MvPState,
    ScoreConfig,
    ScoreState,
    accumulate_structured,
    effective_weight,
    map_score,
    mvp_accumulate,
    score_variant,
)
from .masking import BinaryMask, sparsity_to_v, top_v_mask
from .tensor import ShapeError, Tensor

__all__ = ["CRITERIA", "SparseLinear", "ForwardRecord", "masked_weight"]

CRITERIA = ("map", "mvp", "pst", "random")


def masked_weight(w: Tensor, score: Tensor, mask: BinaryMask) -> Tensor:
    """``w * mask`` with a straight-through gradient to ``score``.

    The weight receives ``g * mask``; the score receives ``g * w``, i.e. the
    mask is treated as the identity of the score in the backward pass.
    """
    if w.shape != mask.shape or score.shape != mask.shape:
        raise ShapeError(f"masked_weight: weight {w.shape}, score {score.shape} and "
                         f"mask {mask.shape} must agree")
    m = mask.as_float()
    W = w.data
    return T.custom((w, score), W * m, lambda g: (g * m, g * W))


@dataclass
class ForwardRecord:
    eff: Tensor
    score: Tensor
    masked: Tensor
    mask: BinaryMask
    sparsity: float


class SparseLinear:
    """``y = (W_eff * M) @ x + b`` for an n x k weight and k x m input.

    ``criterion`` picks how the score, and therefore the mask, is produced:

    * ``map``: |W| of a dense trainable weight (or a frozen one with
      ``freeze_weight=True``);
    * ``mvp``: accumulated movement score, seeded with |W_pretrained|;
    * ``pst``: low-rank + structured score on top of ``W0 + beta*U@V``;
      ``variant`` selects a subset of its terms;
    * ``random``: fixed random scores drawn once at construction.
    """

    def __init__(self, w_init: np.ndarray, criterion: str = "pst", *,
                 score_config: ScoreConfig | None = None, variant: str = "full",
                 bias: bool = True, freeze_weight: bool = False,
                 rng: np.random.Generator | None = None,
                 name: str = "layer", role: str = "linear", depth: int = 0):
        if criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
        if criterion == "pst" and variant not in VARIANTS and variant != "legacy":
            raise ValueError(f"unknown score variant {variant!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        w_init = np.array(w_init, dtype=np.float64)
        n, k = w_init.shape
        self.name, self.role, self.depth = name, role, depth
        self.criterion = criterion
        self.variant = variant
        self.freeze_weight = freeze_weight
        self.score_config = score_config or ScoreConfig()
        self.state: ScoreState | None = None
        self.weight: Tensor | None = None
        self.mvp: MvPState | None = None
        self.random_scores: np.ndarray | None = None
        if criterion == "pst":
            self.state = ScoreState.init(w_init, self.score_config, rng, name=name)
        else:
            self.weight = Tensor(w_init, name=f"{name}.W")
            if criterion == "mvp":
                self.mvp = MvPState.init(w_init)
            elif criterion == "random":
                self.random_scores = rng.random((n, k))
        self.bias = T.zeros(n, 1, name=f"{name}.b") if bias else None
        self.last: ForwardRecord | None = None
        self.final: np.ndarray | None = None

    # -- shapes and registries ------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self.state.shape if self.state is not None else self.weight.shape

    def _uses(self, term: str) -> bool:
        if self.criterion != "pst":
            return False
        if self.variant == "legacy":
            return True
        mag, lowrank, struct = VARIANTS[self.variant]
        return {"lowrank": lowrank, "struct": struct}[term]

    def parameters(self) -> list[tuple[str, Tensor, str]]:
        """(name, tensor, group) for everything the optimizer updates."""
        params: list[tuple[str, Tensor, str]] = []
        if self.state is not None:
            s = self.state
            params += [(f"{self.name}.U", s.U, "update"), (f"{self.name}.V", s.V, "update")]
            if self._uses("lowrank"):
                params += [(f"{self.name}.A", s.A, "score"), (f"{self.name}.B", s.B, "score")]
        elif not self.freeze_weight:
            params.append((f"{self.name}.W", self.weight, "weight"))
        if self.bias is not None:
            params.append((f"{self.name}.b", self.bias, "bias"))
        return params

    def accumulators(self) -> list[tuple[str, np.ndarray]]:
        """Trained quantities updated by explicit accumulation, not the optimizer."""
        if self.state is not None:
            if self._uses("struct"):
                return [(f"{self.name}.R", self.state.R), (f"{self.name}.C", self.state.C)]
            return []
        if self.mvp is not None:
            return [(f"{self.name}.S", self.mvp.S)]
        return []

    # -- forward ---------------------------------------------------------------

    def effective(self) -> Tensor:
        if self.state is not None:
            return effective_weight(self.state)
        return self.weight

    def score(self, eff: Tensor | None = None) -> Tensor:
        """Current importance score; the PST score is recorded on the tape."""
        if self.criterion == "pst":
            return score_variant(self.state, self.variant, eff=eff)
        if self.criterion == "map":
            w = self.weight if eff is None else eff
            return Tensor(map_score(w))
        if self.criterion == "mvp":
            return Tensor(self.mvp.S)
        return Tensor(self.random_scores)

    def mask_at(self, sparsity: float) -> BinaryMask:
        n, k = self.shape
        return top_v_mask(self.score().data, sparsity_to_v(n, k, sparsity))

    def forward(self, x: Tensor, sparsity: float) -> Tensor:
        n, k = self.shape
        if x.rows != k:
            raise ShapeError(f"{self.name}: input has {x.rows} rows, layer expects {k}")
        if self.final is not None:
            out = T.matmul(Tensor(self.final), x)
        else:
            eff = self.effective()
            score = self.score(eff)
            mask = top_v_mask(score.data, sparsity_to_v(n, k, sparsity))
            masked = masked_weight(eff, score, mask)
            self.last = ForwardRecord(eff, score, masked, mask, sparsity)
            out = T.matmul(masked, x)
        if self.bias is not None:
            out = T.add(out, T.broadcast_col(self.bias, x.cols))
        return out

    __call__ = forward

    # -- per-step bookkeeping ----------------------------------------------------

    def masked_grad(self, grads: T.GradResult) -> np.ndarray:
        """Gradient w.r.t. the masked weight of the last forward, before masking."""
        if self.last is None:
            raise RuntimeError(f"{self.name}: no forward recorded")
        g = grads.get(self.last.masked)
        return np.zeros(self.shape) if g is None else g

    def accumulate(self, grads: T.GradResult):
        """Apply explicit score accumulation for this step.

        Returns the contribution added: ``(dR, dC)`` for PST, ``dS`` for MvP,
        ``None`` otherwise.
        """
        if self.criterion == "pst":
            return accumulate_structured(self.state, self.masked_grad(grads), self.last.eff.data)
        if self.criterion == "mvp":
            return mvp_accumulate(self.mvp, self.masked_grad(grads), self.weight.data)
        return None

    def finalize(self) -> np.ndarray:
        """Bake ``W_eff * M`` at the last used sparsity; the layer is frozen afterwards."""
        if self.last is None:
            raise RuntimeError(f"{self.name}: finalize() called before any forward")
        if self.final is None:
            mask = self.mask_at(self.last.sparsity)
            w = self.effective().data * mask.as_float()
            w.setflags(write=False)
            self.final = w
        return self.final

    # -- analysis accessors --------------------------------------------------------

    def weight_values(self) -> np.ndarray:
        return self.effective().data.copy()

    def score_values(self) -> np.ndarray:
        return self.score().data.copy()

    def __repr__(self) -> str:
        n, k = self.shape
        return f"SparseLinear({self.name!r}, {n}x{k}, criterion={self.criterion!r})"
