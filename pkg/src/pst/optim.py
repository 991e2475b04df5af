"""AdamW over named :class:`~pst.tensor.Tensor` parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class ParamGroup:
    tensors: dict[str, Tensor]
    weight_decay: float = 0.0
    lr_scale: float = 1.0


@dataclass
class AdamW:
    groups: dict[str, ParamGroup]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for group in self.groups.values():
            for name, t in group.tensors.items():
                if name in seen:
                    raise ValueError(f"parameter {name!r} registered twice")
                seen.add(name)
                self.m.setdefault(name, np.zeros(t.shape))
                self.v.setdefault(name, np.zeros(t.shape))

    def named_parameters(self):
        for group in self.groups.values():
            yield from group.tensors.items()

    def num_parameters(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters())

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        """One update; ``grads`` maps parameter name to gradient (missing = zero)."""
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for group in self.groups.values():
            group_lr = lr * group.lr_scale
            for name, p in group.tensors.items():
                g = grads.get(name)
                if g is None:
                    g = np.zeros(p.shape)
                m = b1 * self.m[name] + (1.0 - b1) * g
                v = b2 * self.v[name] + (1.0 - b2) * g * g
                self.m[name], self.v[name] = m, v
                data = p.data
                if group.weight_decay:
                    data = data * (1.0 - group_lr * group.weight_decay)
                denom = np.sqrt(v / bc2) + self.eps
                p.data = data - group_lr * (m / bc1) / denom


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * factor
    return norm
