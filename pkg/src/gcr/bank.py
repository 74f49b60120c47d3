"""Per-category prototype banks: construction, optional EMA precision fit,
and persistence (GCRF tensors + JSON metadata sidecar).

Prototypes are frozen after construction; the only mutation path is the
explicit EMA fit, which touches diagonal log-precisions only and returns a
new bank. Banks are immutable handles, safe for concurrent readers.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .coreset import CoresetConfig, select_coreset
from .feature_store import DatasetManifest, load_features, read_tensor, write_tensor

BANK_FORMAT_VERSION = 1

# log-precisions clamped so exp() and the log-determinant stay finite
LOG_PREC_MIN = -20.0
LOG_PREC_MAX = 20.0


class BankError(ValueError):
    pass


@dataclass(frozen=True)
class PrototypeBank:
    category: str
    prototypes: np.ndarray                 # (K, D) float32, read-only
    weights: np.ndarray                    # (K,) float64, sums to 1
    log_precisions: Optional[np.ndarray]   # (K, D) float32 or None (identity metric)
    meta: dict

    def __post_init__(self):
        k = self.prototypes.shape[0]
        if self.weights.shape != (k,):
            raise BankError("weights length must equal prototype count")
        if (self.weights < 0).any():
            raise BankError("weights must be nonnegative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise BankError("weights must sum to 1 within 1e-9")
        if self.log_precisions is not None:
            lp = self.log_precisions
            if lp.shape != self.prototypes.shape:
                raise BankError("log_precisions shape must match prototypes")
            if not np.isfinite(lp).all():
                raise BankError("log_precisions must be finite")
            if lp.min() < LOG_PREC_MIN - 1e-6 or lp.max() > LOG_PREC_MAX + 1e-6:
                raise BankError("log_precisions outside clamp range")

    @property
    def K(self) -> int:
        return self.prototypes.shape[0]

    @property
    def D(self) -> int:
        return self.prototypes.shape[1]

    def precisions(self) -> Optional[np.ndarray]:
        """Diagonal precisions exp(log_precisions) in float64, or None."""
        if self.log_precisions is None:
            return None
        return np.exp(self.log_precisions.astype(np.float64))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


def manifest_hash(manifest: DatasetManifest) -> str:
    return hashlib.sha256(manifest.source_path.read_bytes()).hexdigest()


def pool_train_features(manifest: DatasetManifest, category: str,
                        l2_normalize: bool = False) -> np.ndarray:
    """Stack all train-split patch vectors of one category, manifest order."""
    entries = manifest.select(category=category, split="train")
    if not entries:
        raise BankError(f"no train images for category {category!r}")
    blocks = []
    dim = None
    for e in entries:
        fmap = load_features(manifest, e, l2_normalize=l2_normalize)
        if dim is None:
            dim = fmap.D
        elif fmap.D != dim:
            raise BankError(
                f"feature dim mismatch: {e.image_id} has D={fmap.D}, expected {dim}"
            )
        blocks.append(fmap.patches)
    return np.concatenate(blocks, axis=0)


def build_bank(manifest: DatasetManifest, category: str, config: CoresetConfig,
               l2_normalize: bool = False) -> PrototypeBank:
    """Build a bank from the category's normal training patches via coreset
    selection. Weights are uniform; no precisions are fitted here."""
    pooled = pool_train_features(manifest, category, l2_normalize=l2_normalize)
    indices, _ = select_coreset(pooled, config)
    protos = _frozen(pooled[np.asarray(indices)])
    k = protos.shape[0]
    weights = _frozen(np.full(k, 1.0 / k, dtype=np.float64))
    meta = {
        "format_version": BANK_FORMAT_VERSION,
        "category": category,
        "seed": int(config.seed),
        "K_requested": int(config.K),
        "source_manifest_hash": manifest_hash(manifest),
        "l2_normalize": bool(l2_normalize),
    }
    return PrototypeBank(category, protos, weights, None, meta)


def ema_fit_precisions(bank: PrototypeBank, manifest: DatasetManifest,
                       decay: float = 0.99, var_floor: float = 1e-6) -> PrototypeBank:
    """Fit diagonal log-precisions from an EMA of per-prototype variance.

    Each training patch (streamed in manifest order) is hard-assigned to its
    nearest prototype under the identity metric; that prototype's running
    per-dimension variance v is updated as

        v <- decay * v + (1 - decay) * (q - mu)^2

    starting from v = 1, then lambda = 1 / max(v, var_floor). Prototypes and
    weights are unchanged. The recurrence is order-dependent, so the fit is
    single-threaded; determinism is per manifest order.
    """
    if not (0.0 < decay < 1.0):
        raise ValueError("decay must be in (0, 1)")
    if var_floor <= 0.0:
        raise ValueError("var_floor must be > 0")
    protos64 = bank.prototypes.astype(np.float64)
    var = np.ones((bank.K, bank.D), dtype=np.float64)
    for e in manifest.select(category=bank.category, split="train"):
        fmap = load_features(manifest, e, l2_normalize=bank.meta.get("l2_normalize", False))
        if fmap.D != bank.D:
            raise BankError(f"feature dim mismatch: {e.image_id} has D={fmap.D}")
        _, assign = kernels.nearest_sqdist(fmap.patches, bank.prototypes)
        patches64 = fmap.patches.astype(np.float64)
        for p in range(fmap.N):
            k = assign[p]
            diff = patches64[p] - protos64[k]
            var[k] = decay * var[k] + (1.0 - decay) * diff * diff
    lam = 1.0 / np.maximum(var, var_floor)
    log_prec = np.clip(np.log(lam), LOG_PREC_MIN, LOG_PREC_MAX).astype(np.float32)
    meta = dict(bank.meta)
    meta["ema"] = {"decay": decay, "var_floor": var_floor}
    return PrototypeBank(bank.category, bank.prototypes, bank.weights,
                         _frozen(log_prec), meta)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_bank(bank: PrototypeBank, path) -> None:
    """Write a bank directory: prototypes.gcrf, weights.gcrf,
    log_precisions.gcrf (when present), meta.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_tensor(path / "prototypes.gcrf", bank.prototypes.shape, bank.prototypes)
    write_tensor(path / "weights.gcrf", [bank.K], bank.weights.astype(np.float32))
    if bank.log_precisions is not None:
        write_tensor(path / "log_precisions.gcrf", bank.log_precisions.shape,
                     bank.log_precisions)
    meta = dict(bank.meta)
    # exact float64 weights live in the sidecar; weights.gcrf is the float32
    # projection for external consumers
    meta["weights"] = [float(w) for w in bank.weights]
    with open(path / "meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_bank(path) -> PrototypeBank:
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.is_file():
        raise BankError(f"missing metadata file {meta_file}")
    with open(meta_file, "r", encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("format_version") != BANK_FORMAT_VERSION:
        raise BankError(f"unsupported bank format version {meta.get('format_version')}")
    dims, data = read_tensor(path / "prototypes.gcrf")
    if len(dims) != 2:
        raise BankError("prototypes.gcrf must be rank-2")
    protos = _frozen(data.reshape(dims))
    exact_weights = meta.pop("weights", None)
    if exact_weights is not None:
        weights = np.asarray(exact_weights, dtype=np.float64)
    else:
        _, w32 = read_tensor(path / "weights.gcrf")
        weights = w32.astype(np.float64)
        weights = weights / weights.sum()
    log_prec = None
    lp_file = path / "log_precisions.gcrf"
    if lp_file.is_file():
        lp_dims, lp_data = read_tensor(lp_file)
        log_prec = _frozen(lp_data.reshape(lp_dims))
    return PrototypeBank(meta["category"], protos, _frozen(weights), log_prec, meta)


def bank_checksum(path) -> str:
    """sha256 over a bank directory's files (sorted names), for immutability
    checks across continual steps."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(path.iterdir()):
        if f.is_file():
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()
