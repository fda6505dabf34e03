# retrieval_xattn/evalbench/analysis.py
#
# Where in the input retrieved keys come from.

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from ..errors import ArgumentError
from ..retrieval_attention import RetrievalLog


@dataclass(frozen=True)
class RetrievalHistogram:
    edges: np.ndarray  # n_bins + 1, over [0, 1]
    mass: np.ndarray  # n_bins, sums to 1
    median_position: float
    fraction_retrieved: float
    retrievals: int

    def lines(self) -> list[str]:
        return [
            f"{self.edges[i]:.6g},{self.edges[i + 1]:.6g},{self.mass[i]:.9g}"
            for i in range(self.mass.size)
        ]


def normalized_positions(log: RetrievalLog) -> np.ndarray:
    if log.n_rows < 1:
        raise ArgumentError(f"retrieval log over {log.n_rows} datastore rows")
    return log.positions().astype(np.float64) / log.n_rows


def retrieval_histogram(log: RetrievalLog, n_bins: int = 10) -> RetrievalHistogram:
    """Normalized-position histogram of every retrieved row, with its median.

    Position p / n lands in bin floor(p / n * n_bins).
    """
    if n_bins < 1:
        raise ArgumentError(f"n_bins must be >= 1, got {n_bins}")
    if len(log) == 0 or log.positions().size == 0:
        raise ArgumentError("retrieval_histogram: empty retrieval log")
    pos = normalized_positions(log)
    bins = np.minimum((pos * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins).astype(np.float64)
    return RetrievalHistogram(
        edges=np.linspace(0.0, 1.0, n_bins + 1),
        mass=counts / counts.sum(),
        median_position=float(np.median(pos)),
        fraction_retrieved=np.unique(log.positions()).size / log.n_rows,
        retrievals=int(pos.size),
    )


def coverage_by_head(log: RetrievalLog) -> pd.DataFrame:
    """Per (layer, head): retrievals, median normalized position, fraction of rows ever retrieved."""
    if len(log) == 0:
        raise ArgumentError("coverage_by_head: empty retrieval log")
    groups: dict[tuple[int, int], list[np.ndarray]] = {}
    for r in log:
        groups.setdefault((r.layer, r.head), []).append(r.indices)
    rows = []
    for (layer, head), parts in sorted(groups.items()):
        idx = np.concatenate(parts)
        rows.append({
            "layer": layer,
            "head": head,
            "retrievals": int(idx.size),
            "median_position": float(np.median(idx / log.n_rows)) if idx.size else float("nan"),
            "fraction_retrieved": np.unique(idx).size / log.n_rows,
        })
    return pd.DataFrame(rows)
