"""Diagnostic tables: mask structuredness, weight/score scatter, mask similarity.

All exports are CSV with fixed column orders:

* ``structuredness_<layer>.csv``: bin_lo, bin_hi, row_pct, col_pct
* ``scatter_<layer>.csv``: weight, score, kept
* ``remaining_<layer>.csv``: bin_lo, bin_hi, count
* ``similarity.csv``: layer, role, depth, pair, similarity
"""

from __future__ import annotations

import csv
import itertools
from pathlib import Path
from typing import Mapping

import numpy as np

from .masking import BinaryMask, mask_similarity, row_col_sparsity_histogram
from .trainer import LayerSnapshot, RunReport

__all__ = [
    "structuredness_report",
    "weight_score_scatter",
    "criterion_similarity",
    "remaining_weight_histogram",
    "magnitude_threshold",
    "pairwise_similarity",
    "export_run",
    "write_similarity_csv",
]


def _fmt(x: float) -> str:
    return repr(float(x))


def structuredness_report(masks: Mapping[str, BinaryMask | LayerSnapshot],
                          bins: int = 10) -> dict[str, dict]:
    """Per layer: role plus ``(bin_lo, bin_hi, row_pct, col_pct)`` rows."""
    if not masks:
        raise ValueError("structuredness_report needs at least one mask")
    out = {}
    for name, item in masks.items():
        mask = item.mask if isinstance(item, LayerSnapshot) else item
        role = item.role if isinstance(item, LayerSnapshot) else name
        row_h, col_h = row_col_sparsity_histogram(mask, bins)
        edges = np.linspace(0.0, 1.0, bins + 1)
        out[name] = {
            "role": role,
            "rows": [(edges[i], edges[i + 1], row_h[i], col_h[i]) for i in range(bins)],
        }
    return out


def weight_score_scatter(snap: LayerSnapshot) -> np.ndarray:
    """N x 3 array of (weight, score, kept) for every entry, row-major."""
    return np.column_stack([snap.weight.ravel(), snap.score.ravel(),
                            snap.mask.bits.ravel().astype(np.float64)])


def magnitude_threshold(snap: LayerSnapshot) -> float:
    """The v-th largest |weight|, v being the layer's kept count."""
    v = snap.mask.v
    if v == 0:
        return float("inf")
    return float(np.sort(np.abs(snap.weight).ravel())[::-1][v - 1])


def remaining_weight_histogram(snap: LayerSnapshot, bins: int = 20,
                               limit: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of kept weight values over ``[-limit, limit]``.

    ``limit`` defaults to the largest |weight| in the layer.
    """
    kept = snap.weight[snap.mask.bits]
    if limit is None:
        limit = float(np.abs(snap.weight).max()) or 1.0
    counts, edges = np.histogram(np.clip(kept, -limit, limit), bins=bins, range=(-limit, limit))
    return edges, counts


def _masks_of(run) -> dict[str, BinaryMask]:
    return run.masks if isinstance(run, RunReport) else dict(run)


def criterion_similarity(run_a: RunReport, run_b: RunReport) -> list[dict]:
    """Per-layer Hamming similarity between the final masks of two runs."""
    ma, mb = _masks_of(run_a), _masks_of(run_b)
    if set(ma) != set(mb):
        raise ValueError(f"runs have different layers: {sorted(ma)} vs {sorted(mb)}")
    if isinstance(run_a, RunReport) and isinstance(run_b, RunReport):
        pa, pb = run_a.config.get("target_p"), run_b.config.get("target_p")
        if pa != pb:
            raise ValueError(f"runs use different target sparsity: {pa} vs {pb}")
    rows = []
    for name in ma:
        if ma[name].shape != mb[name].shape:
            raise ValueError(f"{name}: mask shapes differ, {ma[name].shape} vs {mb[name].shape}")
        info = run_a.layers.get(name, {}) if isinstance(run_a, RunReport) else {}
        rows.append({
            "layer": name,
            "role": info.get("role", ""),
            "depth": info.get("depth", 0),
            "similarity": mask_similarity(ma[name], mb[name]),
        })
    return rows


def pairwise_similarity(runs: Mapping[str, RunReport]) -> list[dict]:
    """``criterion_similarity`` for every unordered pair, tagged ``a|b``."""
    out = []
    for a, b in itertools.combinations(runs, 2):
        for row in criterion_similarity(runs[a], runs[b]):
            out.append({**row, "pair": f"{a}|{b}"})
    return out


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def _write(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def export_run(report: RunReport, out_dir: str | Path, bins: int = 10) -> list[Path]:
    """Write the per-layer CSVs for one run; returns the files written."""
    if not report.snapshots:
        raise ValueError("report carries no layer snapshots; export it from a live run")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    table = structuredness_report(report.snapshots, bins)
    for name, snap in report.snapshots.items():
        p = out_dir / f"structuredness_{name}.csv"
        _write(p, ["bin_lo", "bin_hi", "row_pct", "col_pct"],
               [[_fmt(lo), _fmt(hi), _fmt(100 * r), _fmt(100 * c)]
                for lo, hi, r, c in table[name]["rows"]])
        written.append(p)

        p = out_dir / f"scatter_{name}.csv"
        _write(p, ["weight", "score", "kept"],
               [[_fmt(w), _fmt(s), int(k)] for w, s, k in weight_score_scatter(snap)])
        written.append(p)

        edges, counts = remaining_weight_histogram(snap)
        p = out_dir / f"remaining_{name}.csv"
        _write(p, ["bin_lo", "bin_hi", "count"],
               [[_fmt(edges[i]), _fmt(edges[i + 1]), int(counts[i])] for i in range(len(counts))])
        written.append(p)
    return written


def write_similarity_csv(rows: list[dict], path: str | Path) -> None:
    _write(Path(path), ["layer", "role", "depth", "pair", "similarity"],
           [[r["layer"], r["role"], r["depth"], r.get("pair", ""), _fmt(r["similarity"])]
            for r in rows])
