"""Desk-scale models built from :class:`SparseLinear` layers.

Inputs are column batches: an MLP takes k x m, the transformer takes
d x (B * seq_len) with each sequence occupying ``seq_len`` adjacent columns.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .masking import BinaryMask
from .sparse_layer import SparseLinear
from .tensor import Tensor

__all__ = [
    "FIG_ROLES",
    "Model",
    "MlpModel",
    "TinyTransformer",
    "build_mlp",
    "build_tiny_transformer",
]

# layer positions whose masks the structuredness/similarity analyses report
FIG_ROLES = ("attn.query", "attn.output", "ffn.input", "ffn.output")

_ACTIVATIONS = {"relu": T.relu, "gelu": T.gelu, "none": lambda t: t}


def _init_weight(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(k), size=(n, k))


class Model:
    """Shared registry plumbing; subclasses fill ``layers`` and ``extra``."""

    task_type = "regression"

    def __init__(self):
        self.layers: list[SparseLinear] = []
        self.extra: list[tuple[str, Tensor, str]] = []

    def sparse_layers(self) -> list[SparseLinear]:
        return list(self.layers)

    def layer(self, name: str) -> SparseLinear:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(f"no sparse layer named {name!r}")

    def parameters(self) -> list[tuple[str, Tensor, str]]:
        params = []
        for l in self.layers:
            params += l.parameters()
        return params + list(self.extra)

    def accumulators(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for l in self.layers:
            out += l.accumulators()
        return out

    def role_masks(self, sparsity: float, roles=FIG_ROLES) -> dict[str, BinaryMask]:
        return {l.name: l.mask_at(sparsity) for l in self.layers if l.role in roles}

    def roles(self) -> list[str]:
        seen = []
        for l in self.layers:
            if l.role not in seen:
                seen.append(l.role)
        return seen

    # forward/loss implemented by subclasses
    def forward(self, x: Tensor, sparsity: float) -> Tensor:
        raise NotImplementedError

    def loss(self, x: np.ndarray, y: np.ndarray, sparsity: float) -> Tensor:
        out = self.forward(Tensor(x), sparsity)
        if self.task_type == "classification":
            return T.cross_entropy(T.transpose(out), y)
        return T.mse(out, Tensor(y))

    def predict(self, x: np.ndarray, sparsity: float) -> np.ndarray:
        return self.forward(Tensor(x), sparsity).data

    # -- checkpoint support ---------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Every array that defines the model, keyed by a stable name."""
        out: dict[str, np.ndarray] = {}
        for l in self.layers:
            p = l.name
            if l.state is not None:
                s = l.state
                out.update({f"{p}.w0": s.w0, f"{p}.U": s.U.data, f"{p}.V": s.V.data,
                            f"{p}.A": s.A.data, f"{p}.B": s.B.data, f"{p}.R": s.R,
                            f"{p}.C": s.C})
            else:
                out[f"{p}.W"] = l.weight.data
            if l.mvp is not None:
                out[f"{p}.S"] = l.mvp.S
            if l.random_scores is not None:
                out[f"{p}.random_scores"] = l.random_scores
            if l.bias is not None:
                out[f"{p}.b"] = l.bias.data
        for name, t, _ in self.extra:
            out[name] = t.data
        return out

    def load_state_tensors(self, arrays: dict[str, np.ndarray]) -> None:
        def take(key, shape):
            if key not in arrays:
                raise KeyError(f"checkpoint is missing {key!r}")
            a = np.array(arrays[key], dtype=np.float64)
            if a.shape != shape:
                raise ValueError(f"{key}: checkpoint shape {a.shape} != model shape {shape}")
            return a

        for l in self.layers:
            p = l.name
            if l.state is not None:
                s = l.state
                w0 = take(f"{p}.w0", s.w0.shape)
                w0.setflags(write=False)
                s.w0 = w0
                for attr in "UVAB":
                    t = getattr(s, attr)
                    t.data = take(f"{p}.{attr}", t.shape)
                s.R = take(f"{p}.R", s.R.shape)
                s.C = take(f"{p}.C", s.C.shape)
            else:
                l.weight.data = take(f"{p}.W", l.weight.shape)
            if l.mvp is not None:
                l.mvp.S = take(f"{p}.S", l.mvp.S.shape)
            if l.random_scores is not None:
                l.random_scores = take(f"{p}.random_scores", l.random_scores.shape)
            if l.bias is not None:
                l.bias.data = take(f"{p}.b", l.bias.shape)
        for name, t, _ in self.extra:
            t.data = take(name, t.shape)


class MlpModel(Model):
    """Stack of sparse layers ``dims[0] -> dims[1] -> ...`` and an optional dense head.

    The activation is applied between sparse layers and before the head.
    """

    def __init__(self, dims: list[int], *, head_dim: int | None = None,
                 activation: str = "relu", task_type: str = "regression",
                 weights: list[np.ndarray] | None = None,
                 rng: np.random.Generator | None = None, **layer_kwargs):
        super().__init__()
        if len(dims) < 2:
            raise ValueError(f"need at least input and output dims, got {dims}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.dims = list(dims)
        self.activation = activation
        self.task_type = task_type
        for i, (k, n) in enumerate(zip(dims[:-1], dims[1:])):
            w = weights[i] if weights is not None else _init_weight(rng, n, k)
            if w.shape != (n, k):
                raise ValueError(f"layer {i}: weight shape {w.shape} != ({n}, {k})")
            # own stream per layer, so weights do not depend on the criterion
            self.layers.append(SparseLinear(w, name=f"layer{i}", role="linear", depth=i,
                                            rng=rng.spawn(1)[0], **layer_kwargs))
        self.head_w = self.head_b = None
        if head_dim is not None:
            self.head_w = Tensor(_init_weight(rng, head_dim, dims[-1]), name="head.W")
            self.head_b = T.zeros(head_dim, 1, name="head.b")
            self.extra = [("head.W", self.head_w, "head"), ("head.b", self.head_b, "bias")]

    def forward(self, x: Tensor, sparsity: float) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer(h, sparsity)
            if i < last or self.head_w is not None:
                h = act(h)
        if self.head_w is not None:
            h = T.add(T.matmul(self.head_w, h), T.broadcast_col(self.head_b, h.cols))
        return h


class TinyTransformer(Model):
    """Post-LN single-head transformer encoder with mean pooling and a class head."""

    task_type = "classification"

    def __init__(self, d: int, *, seq_len: int, n_classes: int, n_blocks: int = 1,
                 rng: np.random.Generator | None = None, **layer_kwargs):
        super().__init__()
        if d < 4:
            raise ValueError(f"model dim must be >= 4, got {d}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.d, self.seq_len, self.n_classes, self.n_blocks = d, seq_len, n_classes, n_blocks
        self.blocks = []
        h = 4 * d
        for b in range(n_blocks):
            def mk(role, n, k):
                return SparseLinear(_init_weight(rng, n, k), name=f"block{b}.{role}",
                                    role=role, depth=b, rng=rng.spawn(1)[0], **layer_kwargs)
            blk = {
                "q": mk("attn.query", d, d),
                "k": mk("attn.key", d, d),
                "v": mk("attn.value", d, d),
                "o": mk("attn.output", d, d),
                "fi": mk("ffn.input", h, d),
                "fo": mk("ffn.output", d, h),
            }
            norms = {}
            for ln in ("ln1", "ln2"):
                g = T.ones(d, 1, name=f"block{b}.{ln}.g")
                be = T.zeros(d, 1, name=f"block{b}.{ln}.b")
                norms[ln] = (g, be)
                self.extra += [(g.name, g, "norm"), (be.name, be, "norm")]
            self.layers += list(blk.values())
            self.blocks.append((blk, norms))
        self.head_w = Tensor(_init_weight(rng, n_classes, d), name="head.W")
        self.head_b = T.zeros(n_classes, 1, name="head.b")
        self.extra += [("head.W", self.head_w, "head"), ("head.b", self.head_b, "bias")]

    def _masks(self, m: int):
        if m % self.seq_len:
            raise ValueError(f"{m} columns is not a whole number of length-{self.seq_len} sequences")
        seq = np.arange(m) // self.seq_len
        attn = np.where(seq[:, None] == seq[None, :], 0.0, -1e9)
        n_seq = m // self.seq_len
        pool = np.zeros((m, n_seq))
        pool[np.arange(m), seq] = 1.0 / self.seq_len
        return Tensor(attn), Tensor(pool)

    def encode(self, x: Tensor, sparsity: float) -> Tensor:
        attn_mask, _ = self._masks(x.cols)
        h = x
        inv_sqrt_d = 1.0 / math.sqrt(self.d)
        for blk, norms in self.blocks:
            q = blk["q"](h, sparsity)
            k = blk["k"](h, sparsity)
            v = blk["v"](h, sparsity)
            s = T.add(T.scale(T.matmul(T.transpose(q), k), inv_sqrt_d), attn_mask)
            p = T.softmax_rows(s)
            a = blk["o"](T.matmul(v, T.transpose(p)), sparsity)
            h = T.layer_norm_cols(T.add(h, a), *norms["ln1"])
            f = blk["fo"](T.gelu(blk["fi"](h, sparsity)), sparsity)
            h = T.layer_norm_cols(T.add(h, f), *norms["ln2"])
        return h

    def forward(self, x: Tensor, sparsity: float) -> Tensor:
        """Class logits, n_classes x B."""
        _, pool = self._masks(x.cols)
        pooled = T.matmul(self.encode(x, sparsity), pool)
        return T.add(T.matmul(self.head_w, pooled), T.broadcast_col(self.head_b, pooled.cols))


def build_mlp(dims: list[int], seed: int, **kwargs) -> MlpModel:
    return MlpModel(dims, rng=np.random.default_rng([seed, 0]), **kwargs)


def build_tiny_transformer(d: int, seed: int, *, seq_len: int = 8, n_classes: int = 4,
                           n_blocks: int = 1, **layer_kwargs) -> TinyTransformer:
    return TinyTransformer(d, seq_len=seq_len, n_classes=n_classes, n_blocks=n_blocks,
                           rng=np.random.default_rng([seed, 0]), **layer_kwargs)
