"""Exact top-k inner-product search over an embedding set.

For unit-norm vectors the inner product equals cosine similarity and is
monotone in negative Euclidean distance, so one metric serves matching,
post-processing, and evaluation. No approximate structures: results are
exact and deterministic, with ties broken by ascending database index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding import EmbeddingSet
from .errors import DimMismatch


@dataclass(frozen=True)
class Neighbor:
    """One search hit: row index into the database set, inner-product score."""

    index: int
    score: float


def _topk_matrix(queries: np.ndarray, db: EmbeddingSet, k: int) -> list[list[Neighbor]]:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if queries.shape[1] != db.dim:
        raise DimMismatch(f"query dim {queries.shape[1]} != db dim {db.dim}")
    n = db.count
    if queries.shape[0] == 0 or n == 0:
        return [[] for _ in range(queries.shape[0])]

    # Scores in float64; one gemm for the whole batch.
    scores = db.matrix.astype(np.float64) @ queries.astype(np.float64).T
    m = min(k, n)
    out: list[list[Neighbor]] = []
    for col in range(queries.shape[0]):
        s = scores[:, col]
        if m == n:
            cand = np.arange(n)
        else:
            # Partial selection, then widen to every score tied with the
            # m-th largest so the index tie-break stays exact.
            part = np.argpartition(-s, m - 1)[:m]
            kth = s[part].min()
            cand = np.flatnonzero(s >= kth)
        order = np.lexsort((cand, -s[cand]))[:m]
        chosen = cand[order]
        out.append([Neighbor(int(i), float(s[i])) for i in chosen])
    return out


def topk(query: np.ndarray, db: EmbeddingSet, k: int) -> list[Neighbor]:
    """Exact top-k rows of ``db`` by inner product with ``query``.

    Returns min(k, db.count) neighbors sorted by score descending, ties by
    ascending index.
    """
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise DimMismatch(f"expected a 1-d query, got shape {q.shape}")
    return _topk_matrix(q[None, :], db, k)[0]


def topk_batch(queries: EmbeddingSet, db: EmbeddingSet, k: int) -> list[list[Neighbor]]:
    """Per-query :func:`topk` over a whole query set, in query order."""
    return _topk_matrix(queries.matrix.astype(np.float64), db, k)
