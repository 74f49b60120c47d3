"""Synthetic multi-category feature generator for desk-scale verification.

Categories live on well-separated Gaussian mixtures whose component means sit
on a sphere; anomalous test images carry a contiguous rectangular defect whose
patches are shifted along a random unit direction. Rectangles keep the pixel
ground truth trivially auditable, and the fixed 8x upsampling factor gives the
bilinear path a nontrivial ratio to chew on.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .feature_store import DatasetManifest, load_manifest, save_manifest, write_tensor

UPSCALE = 8  # H0 = 8 * H_grid, W0 = 8 * W_grid


@dataclass(frozen=True)
class SynthSpec:
    num_categories: int = 5
    D: int = 16
    grid: tuple = (8, 8)                  # (H_grid, W_grid)
    components_per_category: int = 3
    mean_separation: float = 1.0          # min distance between any two component means
    intra_std: float = 0.05
    anomaly_shift: float = 1.0            # offset magnitude of defective patches
    defect_area_frac: float = 0.06
    images_per_split: tuple = (12, 40)    # (train, test) images per category
    seed: int = 0
    sphere_radius: float = 0.0            # 0 -> 2 * mean_separation

    def __post_init__(self):
        if self.num_categories < 1 or self.D < 1 or self.components_per_category < 1:
            raise ValueError("num_categories, D, components_per_category must be >= 1")
        if self.mean_separation <= 0 or self.anomaly_shift < 0 or self.intra_std < 0:
            raise ValueError("mean_separation must be > 0; stds/shift nonnegative")
        if not (0.0 < self.defect_area_frac < 1.0):
            raise ValueError("defect_area_frac must be in (0, 1)")
        if min(self.grid) < 1 or min(self.images_per_split) < 1:
            raise ValueError("grid dims and image counts must be >= 1")

    def radius(self) -> float:
        return self.sphere_radius if self.sphere_radius > 0 else 2.0 * self.mean_separation


def _sample_component_means(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample all category component means on the sphere with
    pairwise separation >= mean_separation."""
    total = spec.num_categories * spec.components_per_category
    means = np.empty((total, spec.D), dtype=np.float64)
    r = spec.radius()
    for i in range(total):
        for _ in range(10_000):
            v = rng.standard_normal(spec.D)
            v *= r / np.linalg.norm(v)
            if i == 0 or (np.linalg.norm(means[:i] - v, axis=1) >= spec.mean_separation).all():
                means[i] = v
                break
        else:
            raise RuntimeError(
                "rejection-sampling failure: cannot place component means with "
                f"separation {spec.mean_separation} on sphere radius {r} (spec infeasible)"
            )
    return means.reshape(spec.num_categories, spec.components_per_category, spec.D)


def _defect_rect(spec: SynthSpec, rng: np.random.Generator) -> tuple:
    h, w = spec.grid
    target = max(1.0, spec.defect_area_frac * h * w)
    rh = int(np.clip(round(np.sqrt(target)), 1, h))
    rw = int(np.clip(round(target / rh), 1, w))
    y = int(rng.integers(0, h - rh + 1))
    x = int(rng.integers(0, w - rw + 1))
    return y, x, rh, rw


def _normal_patches(spec: SynthSpec, means: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.grid
    n = h * w
    comp = rng.integers(0, spec.components_per_category, size=n)
    return means[comp] + spec.intra_std * rng.standard_normal((n, spec.D))


def generate(spec: SynthSpec, out_dir, feature_scale: dict = None) -> DatasetManifest:
    """Write a synthetic dataset (GCRF features, masks, manifest) and return
    the validated manifest.

    feature_scale optionally multiplies whole categories' feature tensors by
    a constant (category name -> factor); used to build the score-scale
    mismatch instance for the routing-rule ablation.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    cat_means = _sample_component_means(spec, rng)  # may reject before any IO
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    h, w = spec.grid
    H0, W0 = UPSCALE * h, UPSCALE * w
    n_train, n_test = spec.images_per_split
    feature_scale = feature_scale or {}

    rows = []
    for ci in range(spec.num_categories):
        cat = f"cat{ci:02d}"
        scale = float(feature_scale.get(cat, 1.0))
        for split, count in (("train", n_train), ("test", n_test)):
            for j in range(count):
                image_id = f"{cat}_{split}_{j:03d}"
                patches = _normal_patches(spec, cat_means[ci], rng)
                label = 0
                mask_path = None
                if split == "test":
                    anomalous = j % 2 == 1
                    mask_grid = np.zeros((h, w), dtype=np.float32)
                    if anomalous:
                        y, x, rh, rw = _defect_rect(spec, rng)
                        mask_grid[y:y + rh, x:x + rw] = 1.0
                        direction = rng.standard_normal(spec.D)
                        direction /= np.linalg.norm(direction)
                        flat = mask_grid.reshape(-1).astype(bool)
                        patches[flat] += spec.anomaly_shift * direction
                        label = 1
                    mask = np.kron(mask_grid, np.ones((UPSCALE, UPSCALE), dtype=np.float32))
                    mask_path = f"masks/{image_id}.gcrf"
                    write_tensor(out_dir / mask_path, [H0, W0], mask)
                tensor = (scale * patches).astype(np.float32).reshape(h, w, spec.D)
                tensor = np.ascontiguousarray(tensor.transpose(2, 0, 1))  # (D, H, W)
                feature_path = f"features/{image_id}.gcrf"
                write_tensor(out_dir / feature_path, [spec.D, h, w], tensor)
                rows.append({
                    "image_id": image_id,
                    "category": cat,
                    "split": split,
                    "image_label": label,
                    "feature_path": feature_path,
                    "mask_path": mask_path,
                    "image_height": H0,
                    "image_width": W0,
                })

    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(manifest_path, rows)
    with open(out_dir / "synth.json", "w", encoding="utf-8") as f:
        json.dump({"spec": asdict(spec), "feature_scale": feature_scale}, f, indent=1)
    return load_manifest(manifest_path)


def generate_scale_mismatch(spec: SynthSpec, out_dir, factor: float = 10.0) -> DatasetManifest:
    """Scale-mismatch instance for the routing ablation: the first category's
    features (train and test) are inflated by `factor`, blowing up that head's
    score scale while leaving the shared routing geometry decisive."""
    return generate(spec, out_dir, feature_scale={"cat00": factor})
