"""Task-agnostic head selection.

Geometry routing accumulates per-patch nearest-prototype squared distances
under the raw shared metric and picks the head with the smallest total. It
never looks at bank precisions or at any ScoringConfig: cross-head decision
making is kept separate from within-head anomaly scoring, which is the whole
point. Score-based routing (argmin of head-specific image scores) is kept
only as the ablation baseline.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .bank import PrototypeBank
from .feature_store import PatchFeatureMap
from .scoring import ScoringConfig, head_anomaly_map, result_from_grid


@dataclass(frozen=True)
class RoutingConfig:
    rule: str = "geometry"            # geometry|score_based
    normalize: str = "mean"           # sum|mean; the decision is identical either way
    subsample_M: Optional[int] = None # evaluate only M patches (speed knob, off by default)
    subsample_seed: int = 0
    topk: int = 1

    def __post_init__(self):
        if self.rule not in ("geometry", "score_based"):
            raise ValueError("rule must be geometry|score_based")
        if self.normalize not in ("sum", "mean"):
            raise ValueError("normalize must be sum|mean")
        if self.subsample_M is not None and self.subsample_M < 1:
            raise ValueError("subsample_M must be >= 1")
        if self.topk < 1:
            raise ValueError("topk must be >= 1")


@dataclass(frozen=True)
class RoutingDecision:
    distances: dict                       # category -> r_c(x)
    selected: tuple                       # topk categories, ascending distance
    subsample_indices: Optional[tuple] = None


def subsample_indices(n_patches: int, cfg: RoutingConfig) -> Optional[np.ndarray]:
    """Seeded patch subset shared by every candidate bank for one image.

    Indices are sorted so that M == N degenerates to exactly the full
    evaluation (same accumulation order, identical floats).
    """
    if cfg.subsample_M is None:
        return None
    if cfg.subsample_M > n_patches:
        raise ValueError(f"subsample_M={cfg.subsample_M} exceeds N={n_patches}")
    rng = np.random.default_rng(cfg.subsample_seed)
    idx = rng.permutation(n_patches)[: cfg.subsample_M]
    idx.sort()
    return idx


def routing_distance(features: PatchFeatureMap, bank: PrototypeBank,
                     cfg: RoutingConfig, indices: np.ndarray = None) -> float:
    """Accumulated nearest-prototype squared distance, identity metric always.

    normalize="sum" totals over the evaluated patches; "mean" divides by
    their count. The subset comes from (subsample_seed, M, N) only, so every
    candidate bank sees the same patches.
    """
    if features.D != bank.D:
        raise ValueError(f"dim mismatch: features D={features.D}, bank D={bank.D}")
    patches = features.patches
    if indices is None:
        indices = subsample_indices(features.N, cfg)
    if indices is not None:
        patches = np.ascontiguousarray(patches[indices])
    min_d, _ = kernels.nearest_sqdist(patches, bank.prototypes)
    total = float(min_d.sum())
    if cfg.normalize == "mean":
        return total / patches.shape[0]
    return total


def select_by_distance(distances: dict, topk: int) -> tuple:
    """Ascending-distance top-k selection, lexicographic tie-break."""
    if not distances:
        raise ValueError("empty candidate set")
    order = sorted(distances, key=lambda c: (distances[c], c))
    return tuple(order[: min(topk, len(order))])


def route(features: PatchFeatureMap, banks: dict, cfg: RoutingConfig) -> RoutingDecision:
    """Top-1 (or top-k) gating by geometric routing distance."""
    if not banks:
        raise ValueError("empty candidate set")
    idx = subsample_indices(features.N, cfg)
    distances = {c: routing_distance(features, banks[c], cfg, indices=idx)
                 for c in sorted(banks)}
    return RoutingDecision(
        distances=distances,
        selected=select_by_distance(distances, cfg.topk),
        subsample_indices=tuple(int(i) for i in idx) if idx is not None else None,
    )


def route_score_based(features: PatchFeatureMap, banks: dict, scoring_cfg: ScoringConfig,
                      out_hw: tuple = None, topk: int = 1) -> RoutingDecision:
    """Ablation baseline: select the head with the minimum head-specific
    image-level anomaly score (full map, upsample, top-q pool).

    Unlike geometry routing this compares scores across independently built
    heads, so mismatched score scales can flip the decision.
    """
    if not banks:
        raise ValueError("empty candidate set")
    scores = {}
    for c in sorted(banks):
        grid = head_anomaly_map(features, banks[c], scoring_cfg)
        h0, w0 = out_hw if out_hw is not None else grid.shape
        scores[c] = result_from_grid(grid, scoring_cfg, h0, w0, c).image_score
    return RoutingDecision(
        distances=scores,
        selected=select_by_distance(scores, topk),
    )


def fuse_topk_max(maps: list) -> np.ndarray:
    """Elementwise maximum over same-shape grid maps (robustness variant)."""
    if not maps:
        raise ValueError("no maps to fuse")
    out = np.asarray(maps[0], dtype=np.float64)
    for m in maps[1:]:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != out.shape:
            raise ValueError(f"shape mismatch: {m.shape} vs {out.shape}")
        out = np.maximum(out, m)
    return out
