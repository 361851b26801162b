"""Index scheduling: rank client states and serve the highest-ranked ones.

The ranking vector is whatever per-label score the caller supplies. The
pipeline uses the value gap between winning and losing a priority slot
(a client's willingness to pay), so states that gain nothing from priority
collapse into the shared rank-0 cluster.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .mdp import N_LABELS, ClientObs, label_of


@dataclass(frozen=True)
class IndexTable:
    index: np.ndarray  # (945,) int ranks

    def __post_init__(self):
        idx = np.asarray(self.index)
        if idx.shape != (N_LABELS,) or (idx < 0).any():
            raise ValueError("index must be a non-negative vector over all labels")

    def of(self, label: int) -> int:
        return int(self.index[label])

    @property
    def n_nonminimal(self) -> int:
        return int((self.index > 0).sum())


def build_index(v, min_epsilon: float = 1e-9) -> IndexTable:
    v = np.asarray(v, dtype=float)
    if not np.isfinite(v).all():
        raise ValueError("values must be finite")
    index = np.zeros(len(v), dtype=np.int64)
    rest = np.nonzero(v > v.min() + min_epsilon)[0]
    # stable sort keeps lower labels first among equal values
    order = rest[np.argsort(v[rest], kind="stable")]
    index[order] = np.arange(1, len(order) + 1)
    return IndexTable(index)


def index_policy(clients: Sequence[ClientObs], table: IndexTable, n_hi: int) -> frozenset[int]:
    if len(clients) < n_hi:
        raise ValueError(f"need at least {n_hi} clients, got {len(clients)}")
    ranked = sorted(
        clients,
        key=lambda c: (-table.of(label_of(c.buffer, c.stalls, c.qoe)), c.buffer, c.client_id),
    )
    return frozenset(c.client_id for c in ranked[:n_hi])


class IndexPolicy:
    def __init__(self, table: IndexTable):
        self.table = table

    def __call__(self, clients: Sequence[ClientObs], ctx, n_hi: int) -> frozenset[int]:
        return index_policy(clients, self.table, n_hi)


def rank_consistency(table_a: IndexTable, table_b: IndexTable, top_k: int | None = 100) -> float:
    """Spearman correlation over the top non-minimal states of ``table_a``."""
    a, b = np.asarray(table_a.index), np.asarray(table_b.index)
    shared = np.nonzero(a > 0)[0]
    if top_k is not None:
        shared = shared[np.argsort(-a[shared], kind="stable")][:top_k]
    if len(shared) < 3:
        raise ValueError("fewer than 3 shared states")
    rho = spearmanr(a[shared], b[shared]).statistic
    return float(rho) if np.isfinite(rho) else 0.0


def save_index(path, table: IndexTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "index"])
        for label, rank in enumerate(table.index):
            w.writerow([label, int(rank)])


def load_index(path) -> IndexTable:
    index = np.zeros(N_LABELS, dtype=np.int64)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader) != ["label", "index"]:
            raise ValueError("not an index table")
        for label, rank in reader:
            index[int(label)] = int(rank)
    return IndexTable(index)
