"""Top-v binary masks and mask comparison utilities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor

__all__ = [
    "BinaryMask",
    "top_v_mask",
    "sparsity_to_v",
    "mask_similarity",
    "row_col_sparsity_histogram",
]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray  # bool, shape (rows, cols)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    @property
    def v(self) -> int:
        return int(self.bits.sum())

    def as_float(self) -> np.ndarray:
        return self.bits.astype(np.float64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:
        return hash((self.shape, self.bits.tobytes()))

    @classmethod
    def full(cls, rows: int, cols: int, value: bool = True) -> "BinaryMask":
        return cls(np.full((rows, cols), value, dtype=bool))

    def to_strings(self) -> list[str]:
        return ["".join("1" if b else "0" for b in row) for row in self.bits]

    @classmethod
    def from_strings(cls, rows: list[str]) -> "BinaryMask":
        return cls(np.array([[c == "1" for c in r] for r in rows], dtype=bool))


def top_v_mask(scores: Tensor | np.ndarray, v: int) -> BinaryMask:
    """Keep the ``v`` largest scores.

    Ties go to the lower row-major index, so the result is deterministic.
    """
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    n_total = s.size
    if not 0 <= v <= n_total:
        raise ValueError(f"v must lie in [0, {n_total}], got {v}")
    flat = s.ravel()
    # stable sort on the negated scores keeps equal entries in index order
    order = np.argsort(-flat, kind="stable")
    bits = np.zeros(n_total, dtype=bool)
    bits[order[:v]] = True
    return BinaryMask(bits.reshape(s.shape))


def sparsity_to_v(n: int, k: int, sparsity: float) -> int:
    """Number of weights kept in an n x k matrix at the given sparsity."""
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {sparsity}")
    # round first so e.g. (1 - 0.9) * 100 = 9.999999999999998 floors to 10
    return int(math.floor(round((1.0 - sparsity) * n * k, 9)))


def mask_similarity(a: BinaryMask, b: BinaryMask) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"mask_similarity: shape mismatch {a.shape} vs {b.shape}")
    hamming = int(np.count_nonzero(a.bits != b.bits))
    return 1.0 - hamming / a.bits.size


def _bin_fractions(values: np.ndarray, bins: int) -> np.ndarray:
    idx = np.floor(values * bins + 1e-9).astype(int)
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return counts / values.size


def row_col_sparsity_histogram(m: BinaryMask, bins: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Fractions of rows and of columns whose zero-fraction falls in each bin.

    Bins split [0, 1] into equal-width intervals ``[lo, hi)``; the last one
    is closed on the right.
    """
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    if m.bits.size == 0:
        raise ValueError("cannot histogram an empty mask")
    zeros = ~m.bits
    row_sparsity = zeros.mean(axis=1)
    col_sparsity = zeros.mean(axis=0)
    return _bin_fractions(row_sparsity, bins), _bin_fractions(col_sparsity, bins)
