"""Within-head patch scoring: prototype distances, soft-min (LSE) energy
aggregation, anomaly-map upsampling, and top-q image pooling.

All scoring here is per-head; nothing in this module compares values across
heads (that is routing's job, and routing deliberately does not use it).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .bank import PrototypeBank
from .feature_store import PatchFeatureMap


@dataclass(frozen=True)
class ScoringConfig:
    form: str = "energy"            # energy|nll; parameterizations coincide (see energy())
    aggregation: str = "lse"        # lse|min
    tau: float = 1.0                # temperature; LSE -> hard min as tau -> 0
    top_Ke: Optional[int] = None    # restrict LSE to the nearest K_e prototypes
    topq: float = 0.01              # fraction of pixels averaged into the image score

    def __post_init__(self):
        if self.form not in ("energy", "nll"):
            raise ValueError("form must be energy|nll")
        if self.aggregation not in ("lse", "min"):
            raise ValueError("aggregation must be lse|min")
        if self.tau <= 0.0:
            raise ValueError("tau must be > 0")
        if self.top_Ke is not None and self.top_Ke < 1:
            raise ValueError("top_Ke must be >= 1")
        if not (0.0 < self.topq <= 1.0):
            raise ValueError("topq must be in (0, 1]")


@dataclass(frozen=True)
class AnomalyResult:
    grid_map: np.ndarray      # (H', W') per-patch energies
    pixel_map: np.ndarray     # (H0, W0) bilinear upsample of grid_map
    image_score: float        # top-q pool of pixel_map, exactly
    routed_category: str


def distance_matrix(patches: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """(N, K) distances of patch rows to bank prototypes, float64.

    Isotropic banks give plain squared Euclidean distances; with fitted
    log-precisions the entries are the quadratic form
    sum_d lam_d (q_d - mu_d)^2 - sum_d log lam_d.
    """
    if patches.shape[1] != bank.D:
        raise ValueError(f"dim mismatch: patches D={patches.shape[1]}, bank D={bank.D}")
    lam = bank.precisions()
    if lam is None:
        return kernels.all_sqdist(patches, bank.prototypes)
    return kernels.aniso_sqdist(patches, bank.prototypes, lam)


def patch_distances(q: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Distances of a single D-vector to every prototype (K-vector)."""
    q = np.asarray(q, dtype=np.float32).reshape(1, -1)
    return distance_matrix(q, bank)[0]


def aggregate_energies(dists: np.ndarray, weights: np.ndarray,
                       cfg: ScoringConfig) -> np.ndarray:
    """Aggregate an (N, K) distance matrix into N per-patch energies.

    lse:  E = -log sum_k pi_k exp(-d_k / (2 tau)), max-shifted for stability,
          optionally over the K_e smallest distances only.
    min:  E = d_k* / (2 tau) - log pi_k* at the nearest prototype k*; this is
          the exact tau -> 0 limit of lse (minus the divergent scale), which
          keeps min/lse comparisons well-posed.

    form=energy and form=nll share this computation: the Gaussian NLL differs
    from the energy only by q-independent constants once the log-determinant
    is folded into the distances, so both yield identical values here.
    """
    dists = np.atleast_2d(np.asarray(dists, dtype=np.float64))
    n, k = dists.shape
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), (k,))
    if cfg.top_Ke is not None and cfg.top_Ke < k:
        ke = cfg.top_Ke
        sel = np.argpartition(dists, ke - 1, axis=1)[:, :ke]
        sel.sort(axis=1)  # keep lowest-index-first order among the selected
        dists = np.take_along_axis(dists, sel, axis=1)
        w = w[sel]
    else:
        w = np.broadcast_to(w, dists.shape)
    if cfg.aggregation == "min":
        kstar = np.argmin(dists, axis=1)
        rows = np.arange(n)
        return dists[rows, kstar] / (2.0 * cfg.tau) - np.log(w[rows, kstar])
    a = -dists / (2.0 * cfg.tau) + np.log(w)
    amax = a.max(axis=1, keepdims=True)
    return -(amax[:, 0] + np.log(np.exp(a - amax).sum(axis=1)))


def energy(q: np.ndarray, bank: PrototypeBank, cfg: ScoringConfig) -> float:
    """Per-patch anomaly energy for a single D-vector."""
    d = patch_distances(q, bank)
    return float(aggregate_energies(d[None, :], bank.weights, cfg)[0])


def head_anomaly_map(features: PatchFeatureMap, bank: PrototypeBank,
                     cfg: ScoringConfig) -> np.ndarray:
    """Per-patch energy over the H' x W' grid for one head."""
    d = distance_matrix(features.patches, bank)
    e = aggregate_energies(d, bank.weights, cfg)
    return e.reshape(features.H_grid, features.W_grid)


def upsample_bilinear(grid_map: np.ndarray, H0: int, W0: int) -> np.ndarray:
    """Bilinear upsampling with half-pixel centers and edge clamping.

    Source coordinate for output index i is (i + 0.5) * src/dst - 0.5,
    clamped to [0, src-1]; the four neighbors blend linearly. Identity when
    the target equals the grid size.
    """
    grid_map = np.asarray(grid_map, dtype=np.float64)
    h, w = grid_map.shape
    if H0 <= 0 or W0 <= 0:
        raise ValueError("nonpositive target dims")
    if H0 < h or W0 < w:
        raise ValueError("target must be at least the grid size")

    def axis_coords(dst: int, src: int):
        x = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
        x = np.clip(x, 0.0, src - 1.0)
        i0 = np.floor(x).astype(np.int64)
        i0 = np.minimum(i0, src - 2) if src > 1 else np.zeros(dst, dtype=np.int64)
        frac = x - i0
        return i0, frac

    y0, fy = axis_coords(H0, h)
    x0, fx = axis_coords(W0, w)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = fy[:, None]
    fx = fx[None, :]
    top = grid_map[np.ix_(y0, x0)] * (1.0 - fx) + grid_map[np.ix_(y0, x1)] * fx
    bot = grid_map[np.ix_(y1, x0)] * (1.0 - fx) + grid_map[np.ix_(y1, x1)] * fx
    return top * (1.0 - fy) + bot * fy


def topq_pool(pixel_map: np.ndarray, topq: float) -> float:
    """Mean of the largest ceil(topq * pixels) values (at least one pixel)."""
    if not (0.0 < topq <= 1.0):
        raise ValueError("topq must be in (0, 1]")
    flat = np.asarray(pixel_map, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ValueError("empty pixel map")
    m = max(1, math.ceil(topq * flat.size))
    if m >= flat.size:
        return float(flat.mean())
    return float(np.partition(flat, flat.size - m)[flat.size - m:].mean())


def score_image(features: PatchFeatureMap, bank: PrototypeBank, cfg: ScoringConfig,
                H0: int, W0: int, routed_category: str = None) -> AnomalyResult:
    """Full within-head result: grid map, upsampled pixel map, image score."""
    grid = head_anomaly_map(features, bank, cfg)
    return result_from_grid(grid, cfg, H0, W0,
                            routed_category if routed_category is not None else bank.category)


def result_from_grid(grid_map: np.ndarray, cfg: ScoringConfig, H0: int, W0: int,
                     routed_category: str) -> AnomalyResult:
    pixel = upsample_bilinear(grid_map, H0, W0)
    return AnomalyResult(
        grid_map=grid_map,
        pixel_map=pixel,
        image_score=topq_pool(pixel, cfg.topq),
        routed_category=routed_category,
    )
