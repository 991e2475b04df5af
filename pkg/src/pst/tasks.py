"""Synthetic tasks standing in for downstream fine-tuning data.

Samples are stored column-wise: a regression dataset keeps its inputs as a
k x N matrix, a sequence dataset as d x (N * seq_len) with the tokens of
sample i in columns ``i*seq_len .. (i+1)*seq_len - 1``.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "SyntheticTask",
    "gen_planted_teacher",
    "gen_sequence_task",
    "export_csv",
    "import_csv",
]


@dataclass(eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray  # n x N targets, or (N,) int labels
    seq_len: int = 1

    def __post_init__(self):
        if self.x.shape[1] != len(self) * self.seq_len:
            raise ValueError(
                f"x has {self.x.shape[1]} columns, expected {len(self)} samples x "
                f"seq_len {self.seq_len}"
            )

    @property
    def is_classification(self) -> bool:
        return self.y.ndim == 1

    def __len__(self) -> int:
        return self.y.shape[0] if self.is_classification else self.y.shape[1]

    def batch(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx)
        if self.seq_len == 1:
            cols = idx
        else:
            cols = (idx[:, None] * self.seq_len + np.arange(self.seq_len)).ravel()
        y = self.y[idx] if self.is_classification else self.y[:, idx]
        return self.x[:, cols], y


@dataclass(eq=False)
class SyntheticTask:
    kind: str
    seed: int
    train: Dataset
    test: Dataset
    params: dict = field(default_factory=dict)
    teacher: np.ndarray | None = None
    pretrained: np.ndarray | None = None
    n_classes: int | None = None


def _split(n_samples: int, test_frac: float) -> int:
    n_test = max(1, int(round(n_samples * test_frac)))
    if n_test >= n_samples:
        raise ValueError(f"need more than {n_test} samples for a train/test split")
    return n_samples - n_test


def gen_planted_teacher(n: int, k: int, samples: int, sparsity: float, noise_sigma: float,
                        seed: int, *, shift_rank: int = 0, shift_scale: float = 0.3,
                        pretrain_noise: float = 0.01, test_frac: float = 0.2) -> SyntheticTask:
    """Linear regression ``y = T @ x + noise`` with a sparse teacher ``T``.

    A ``round(sparsity * n * k)`` subset of the Gaussian teacher entries is
    zeroed.  The returned ``pretrained`` weight is what a student starts from:
    the teacher plus dense Gaussian noise of std ``pretrain_noise`` and, when
    ``shift_rank > 0``, minus a rank-``shift_rank`` shift the student has to
    learn back.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {sparsity}")
    rng = np.random.default_rng([seed, 17])
    teacher = rng.normal(size=(n, k))
    n_zero = int(round(sparsity * n * k))
    teacher.ravel()[rng.permutation(n * k)[:n_zero]] = 0.0

    pretrained = teacher + pretrain_noise * rng.normal(size=(n, k))
    if shift_rank > 0:
        shift = rng.normal(size=(n, shift_rank)) @ rng.normal(size=(shift_rank, k))
        pretrained = pretrained - shift_scale * shift / np.sqrt(shift_rank)

    x = rng.normal(size=(k, samples))
    y = teacher @ x + noise_sigma * rng.normal(size=(n, samples))
    n_train = _split(samples, test_frac)
    kind = "lowrank_shift" if shift_rank > 0 else "planted"
    return SyntheticTask(
        kind=kind,
        seed=seed,
        train=Dataset(x[:, :n_train], y[:, :n_train]),
        test=Dataset(x[:, n_train:], y[:, n_train:]),
        params=dict(n=n, k=k, samples=samples, sparsity=sparsity, noise_sigma=noise_sigma,
                    shift_rank=shift_rank, shift_scale=shift_scale,
                    pretrain_noise=pretrain_noise, test_frac=test_frac),
        teacher=teacher,
        pretrained=pretrained,
    )


def gen_sequence_task(d: int, seq_len: int, samples: int, n_classes: int, seed: int,
                      *, test_frac: float = 0.2) -> SyntheticTask:
    """Sequence classification from Gaussian token vectors.

    The label is the arg-max of a random linear read-out of the mean of
    ``tanh(W x_t)`` over the tokens, with the query token (position 0)
    weighted double.
    """
    rng = np.random.default_rng([seed, 29])
    W = rng.normal(size=(d, d)) / np.sqrt(d)
    readout = rng.normal(size=(n_classes, d))
    x = rng.normal(size=(d, samples * seq_len))
    h = np.tanh(W @ x).reshape(d, samples, seq_len)
    weights = np.ones(seq_len)
    weights[0] = 2.0
    pooled = (h * weights).sum(axis=2) / weights.sum()
    labels = np.argmax(readout @ pooled, axis=0)
    n_train = _split(samples, test_frac)
    cut = n_train * seq_len
    return SyntheticTask(
        kind="sequence",
        seed=seed,
        train=Dataset(x[:, :cut], labels[:n_train], seq_len),
        test=Dataset(x[:, cut:], labels[n_train:], seq_len),
        params=dict(d=d, seq_len=seq_len, samples=samples, n_classes=n_classes,
                    test_frac=test_frac),
        n_classes=n_classes,
    )


# ---------------------------------------------------------------------------
# CSV round-trip: one row per sample, feature columns then target columns.
# ---------------------------------------------------------------------------

def export_csv(ds: Dataset, path: str | Path) -> None:
    n_feat = ds.x.shape[0]
    if ds.seq_len == 1:
        feat_names = [f"x{i}" for i in range(n_feat)]
    else:
        feat_names = [f"x{t}_{i}" for t in range(ds.seq_len) for i in range(n_feat)]
    if ds.is_classification:
        target_names = ["label"]
    else:
        target_names = [f"y{j}" for j in range(ds.y.shape[0])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(feat_names + target_names)
        for i in range(len(ds)):
            xb, yb = ds.batch(np.array([i]))
            feats = xb.T.ravel()  # token-major
            if ds.is_classification:
                targets = [str(int(yb[0]))]
            else:
                targets = [repr(float(t)) for t in yb[:, 0]]
            w.writerow([repr(float(v)) for v in feats] + targets)


_SEQ_FEAT = re.compile(r"^x(\d+)_(\d+)$")


def import_csv(path: str | Path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    feat_idx = [i for i, h in enumerate(header) if h.startswith("x")]
    target_idx = [i for i, h in enumerate(header) if not h.startswith("x")]
    seq_len = 1
    matches = [_SEQ_FEAT.match(header[i]) for i in feat_idx]
    if feat_idx and all(matches):
        seq_len = max(int(m.group(1)) for m in matches) + 1
    n_feat = len(feat_idx) // seq_len
    data = np.array([[float(r[i]) for i in feat_idx] for r in body])
    x = data.reshape(len(body) * seq_len, n_feat).T
    if [header[i] for i in target_idx] == ["label"]:
        y = np.array([int(r[target_idx[0]]) for r in body])
    else:
        y = np.array([[float(r[i]) for i in target_idx] for r in body]).T
    return Dataset(np.ascontiguousarray(x), y, seq_len)
