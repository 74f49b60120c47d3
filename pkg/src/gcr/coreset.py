"""Greedy k-center (farthest-first) selection of prototypes.

The selection loop keeps a running per-row nearest-selected squared distance
and updates it in O(n*D) per pick instead of rescanning all pairs. Distances
accumulate in float64 so the argmax stays stable for large n*D.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class CoresetConfig:
    K: int
    seed: int = 0
    # distance is fixed to squared Euclidean

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not (0 <= self.seed <= _MASK64):
            raise ValueError("seed must fit in 64 bits")


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (output, next_state)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64, state


def initial_pick(seed: int, n: int) -> int:
    """Seeded uniform row pick for the first prototype."""
    out, _ = splitmix64(seed)
    return out % n


def duplicate_aware_tiebreak(candidates) -> int:
    """Lowest index among maximal values (argmax is ambiguous under ties)."""
    arr = np.asarray(candidates, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty candidate list")
    return int(np.argmax(arr))  # np.argmax returns the first maximum


def select_coreset(features: np.ndarray, config: CoresetConfig) -> tuple[list[int], np.ndarray]:
    """Farthest-first selection of min(K, n) row indices from an (n, D) matrix.

    Returns (indices, min_dists) where min_dists[i] is row i's final squared
    distance to the nearest selected row. The first pick is drawn from a
    seeded splitmix64 stream; each later pick maximizes the current minimum
    squared distance to the already-selected rows, breaking ties toward the
    lowest index.
    """
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ValueError(f"expected (n, D) matrix, got shape {features.shape}")
    n, d = features.shape
    if n == 0:
        raise ValueError("empty feature set")
    if d == 0:
        raise ValueError("zero-dimensional features")
    if not np.isfinite(features).all():
        raise ValueError("non-finite values in features")

    k = config.K
    if k > n:
        warnings.warn(f"K={k} exceeds candidate count n={n}; clamping to {n}")
        k = n

    features = np.ascontiguousarray(features)
    min_d = np.full(n, np.inf, dtype=np.float64)
    first = initial_pick(config.seed, n)
    indices = [first]
    kernels.min_sqdist_update(features, features[first], min_d)
    for _ in range(1, k):
        # selected rows are masked out so duplicates can never be re-picked
        work = min_d.copy()
        work[np.asarray(indices)] = -np.inf
        nxt = int(np.argmax(work))
        indices.append(nxt)
        kernels.min_sqdist_update(features, features[nxt], min_d)
    return indices, min_d
