"""Descriptor post-processing by iterative nearest-negative subtraction.

A target descriptor is isolated from the hard negatives surrounding it:
each iteration finds the current k nearest vectors in a fixed negative
pool, subtracts each scaled by beta/k, and renormalizes. Targets never
see each other; only the negative pool is consulted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding import ZERO_NORM, EmbeddingSet
from .errors import DimMismatch, ZeroVector
from .search import topk


@dataclass(frozen=True)
class NegSubConfig:
    """Hyperparameters: iteration count n, neighbors per iteration k, factor beta."""

    n: int = 1
    k: int = 10
    beta: float = 0.35

    def __post_init__(self) -> None:
        if self.n < 0:
            raise ValueError(f"n must be >= 0, got {self.n}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


def subtract_negatives(
    x: np.ndarray, negatives: EmbeddingSet, cfg: NegSubConfig
) -> np.ndarray:
    """Apply ``cfg.n`` subtract-and-renormalize iterations to one descriptor.

    Each iteration re-searches the k nearest negatives of the current
    vector, subtracts (beta/k) times each of them in rank order, then
    L2-normalizes. With n=0 the input is returned unchanged. Raises
    ZeroVector if a subtraction annihilates the vector, which signals a
    pathological beta/negatives combination.
    """
    y = np.asarray(x, dtype=np.float64).copy()
    if y.ndim != 1:
        raise DimMismatch(f"expected a 1-d descriptor, got shape {y.shape}")
    if y.shape[0] != negatives.dim:
        raise DimMismatch(f"descriptor dim {y.shape[0]} != negatives dim {negatives.dim}")
    if negatives.count < 1:
        raise ValueError("negatives set is empty")
    # Pools smaller than k under-subtract: the scale stays beta / requested k.
    scale = cfg.beta / cfg.k
    for _ in range(cfg.n):
        for nb in topk(y, negatives, cfg.k):
            y -= scale * negatives.row(nb.index)
        norm = float(np.linalg.norm(y))
        if norm < ZERO_NORM:
            raise ZeroVector(
                f"subtraction annihilated the descriptor (norm {norm:.3e})"
            )
        y /= norm
    return y


def subtract_negatives_batch(
    targets: EmbeddingSet, negatives: EmbeddingSet, cfg: NegSubConfig
) -> EmbeddingSet:
    """Post-process every target independently against one fixed pool.

    Targets are never used as negatives for each other, so the output for
    a target depends only on that target and the pool. Errors carry the
    offending target id.
    """
    if targets.dim != negatives.dim:
        raise DimMismatch(f"targets dim {targets.dim} != negatives dim {negatives.dim}")
    rows = np.empty((targets.count, targets.dim), dtype=np.float32)
    for i in range(targets.count):
        try:
            rows[i] = subtract_negatives(targets.row(i), negatives, cfg)
        except ZeroVector as exc:
            raise ZeroVector(f"target {targets.ids[i]!r}: {exc}") from exc
    return EmbeddingSet(targets.ids, rows, unit_norm=True)
