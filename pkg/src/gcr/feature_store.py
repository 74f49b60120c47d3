"""On-disk tensor format (GCRF), dataset manifests, and in-memory feature types.

GCRF layout (little-endian, bit-exact round trip):

    magic "GCRF" (4 bytes) | version u32 = 1 | dtype u8 = 0 (float32) |
    ndim u8 | ndim x u32 dims | row-major float32 payload

Patch features are stored channel-major as (D, H', W'). Masks are GCRF
tensors of {0,1} floats. Non-finite values are rejected at load time rather
than sanitized: distances and LSE would propagate NaN silently otherwise.

All loaded objects are immutable after construction (arrays are marked
read-only) and safe to share across concurrent readers.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"GCRF"
VERSION = 1
DTYPE_F32 = 0

_HEADER = struct.Struct("<4sIBB")


class TensorFormatError(ValueError):
    """Malformed or unsupported GCRF file."""


class ManifestError(ValueError):
    """Manifest fails schema or consistency validation."""


# ---------------------------------------------------------------------------
# GCRF tensor IO
# ---------------------------------------------------------------------------

def write_tensor(path, dims: Sequence[int], payload: np.ndarray) -> None:
    """Write a float32 tensor with explicit dims; round-trips bit-exactly."""
    dims = [int(d) for d in dims]
    if any(d <= 0 for d in dims):
        raise TensorFormatError(f"nonpositive dim in {dims}")
    if len(dims) > 255:
        raise TensorFormatError("too many dims")
    payload = np.asarray(payload, dtype="<f4").reshape(-1)
    if math.prod(dims) != payload.size:
        raise TensorFormatError(
            f"dims/payload mismatch: prod{tuple(dims)}={math.prod(dims)} "
            f"vs {payload.size} values"
        )
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F32, len(dims)))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        f.write(payload.tobytes())


def _read_header(f) -> list[int]:
    head = f.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise TensorFormatError("truncated header")
    magic, version, dtype, ndim = _HEADER.unpack(head)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise TensorFormatError(f"unsupported dtype code {dtype}")
    raw = f.read(4 * ndim)
    if len(raw) < 4 * ndim:
        raise TensorFormatError("truncated dims")
    dims = list(struct.unpack(f"<{ndim}I", raw))
    if any(d <= 0 for d in dims):
        raise TensorFormatError(f"nonpositive dim in {dims}")
    return dims


def read_tensor_dims(path) -> list[int]:
    """Header-only read, used for cheap shape validation."""
    with open(path, "rb") as f:
        return _read_header(f)


def read_tensor(path) -> tuple[list[int], np.ndarray]:
    """Exact inverse of write_tensor; returns (dims, flat float32 array).

    Rejects unknown magic/version/dtype, truncated payloads, and non-finite
    values (reported with the offending flat index). The returned array is
    read-only.
    """
    with open(path, "rb") as f:
        dims = _read_header(f)
        count = math.prod(dims)
        raw = f.read(4 * count + 1)  # +1 detects trailing garbage
    if len(raw) < 4 * count:
        raise TensorFormatError(f"truncated payload in {path}")
    if len(raw) > 4 * count:
        raise TensorFormatError(f"trailing bytes after payload in {path}")
    data = np.frombuffer(raw, dtype="<f4", count=count)
    finite = np.isfinite(data)
    if not finite.all():
        idx = int(np.flatnonzero(~finite)[0])
        raise TensorFormatError(f"non-finite value at flat index {idx} in {path}")
    data = data.copy()
    data.flags.writeable = False
    return dims, data


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchFeatureMap:
    """One image's patch embeddings as a (D, H', W') grid."""

    image_id: str
    D: int
    H_grid: int
    W_grid: int
    data: np.ndarray          # (D, H', W') float32, read-only
    patches: np.ndarray = field(repr=False, default=None)  # (N, D) float32, row-major spatial

    @property
    def N(self) -> int:
        return self.H_grid * self.W_grid

    @staticmethod
    def from_array(image_id: str, arr: np.ndarray) -> "PatchFeatureMap":
        if arr.ndim != 3:
            raise ValueError(f"expected (D, H, W) array, got shape {arr.shape}")
        d, h, w = arr.shape
        arr = np.asarray(arr, dtype=np.float32)
        patches = np.ascontiguousarray(arr.transpose(1, 2, 0).reshape(h * w, d))
        arr = arr.copy() if arr.flags.writeable else arr
        arr.flags.writeable = False
        patches.flags.writeable = False
        return PatchFeatureMap(image_id, d, h, w, arr, patches)


@dataclass(frozen=True)
class PixelMask:
    H0: int
    W0: int
    data: np.ndarray  # (H0, W0) uint8 in {0, 1}, read-only


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    category: str
    split: str                # train|test
    image_label: int          # 0 normal, 1 anomalous
    feature_path: str         # relative to the manifest directory
    mask_path: Optional[str]
    image_height: int         # H0
    image_width: int          # W0


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[ManifestEntry, ...]
    source_path: Path

    def categories(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.category, None)
        return list(seen)

    def select(self, category: str = None, split: str = None) -> list[ManifestEntry]:
        out = []
        for e in self.entries:
            if category is not None and e.category != category:
                continue
            if split is not None and e.split != split:
                continue
            out.append(e)
        return out

    def feature_file(self, entry: ManifestEntry) -> Path:
        return self.root / entry.feature_path

    def mask_file(self, entry: ManifestEntry) -> Optional[Path]:
        return self.root / entry.mask_path if entry.mask_path else None


_ENTRY_KEYS = {
    "image_id": str,
    "category": str,
    "split": str,
    "image_label": int,
    "feature_path": str,
    "mask_path": (str, type(None)),
    "image_height": int,
    "image_width": int,
}
_OPTIONAL_KEYS = {"mask_path"}


def _parse_entry(obj: dict, lineno: int) -> ManifestEntry:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: entry is not an object")
    unknown = set(obj) - set(_ENTRY_KEYS)
    if unknown:
        raise ManifestError(f"line {lineno}: unknown keys {sorted(unknown)}")
    missing = set(_ENTRY_KEYS) - _OPTIONAL_KEYS - set(obj)
    if missing:
        raise ManifestError(f"line {lineno}: missing keys {sorted(missing)}")
    for key, typ in _ENTRY_KEYS.items():
        if key in obj and not isinstance(obj[key], typ):
            raise ManifestError(f"line {lineno}: field {key!r} has wrong type")
    if obj["split"] not in ("train", "test"):
        raise ManifestError(f"line {lineno}: split must be train|test")
    if obj["image_label"] not in (0, 1):
        raise ManifestError(f"line {lineno}: image_label must be 0|1")
    if obj["image_height"] <= 0 or obj["image_width"] <= 0:
        raise ManifestError(f"line {lineno}: nonpositive image size")
    return ManifestEntry(
        image_id=obj["image_id"],
        category=obj["category"],
        split=obj["split"],
        image_label=int(obj["image_label"]),
        feature_path=obj["feature_path"],
        mask_path=obj.get("mask_path"),
        image_height=int(obj["image_height"]),
        image_width=int(obj["image_width"]),
    )


def load_manifest(path) -> DatasetManifest:
    """Load and validate a JSON-lines manifest.

    Training entries must be normal (image_label == 0); referenced feature
    files must exist; mask headers must match the declared image size.
    """
    path = Path(path)
    root = path.parent
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"line {lineno}: invalid JSON ({e})") from e
            entry = _parse_entry(obj, lineno)
            if entry.split == "train" and entry.image_label != 0:
                raise ManifestError(
                    f"line {lineno}: anomalous image in train split ({entry.image_id})"
                )
            feat = root / entry.feature_path
            if not feat.is_file():
                raise ManifestError(f"line {lineno}: missing feature file {feat}")
            if entry.mask_path is not None:
                mask = root / entry.mask_path
                if not mask.is_file():
                    raise ManifestError(f"line {lineno}: missing mask file {mask}")
                dims = read_tensor_dims(mask)
                if dims != [entry.image_height, entry.image_width]:
                    raise ManifestError(
                        f"line {lineno}: mask/image size mismatch "
                        f"({dims} vs [{entry.image_height}, {entry.image_width}])"
                    )
            entries.append(entry)
    if not entries:
        raise ManifestError(f"empty manifest {path}")
    return DatasetManifest(root=root, entries=tuple(entries), source_path=path)


def save_manifest(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def load_features(manifest: DatasetManifest, entry: ManifestEntry,
                  l2_normalize: bool = False) -> PatchFeatureMap:
    """Load one entry's (D, H', W') feature tensor as a PatchFeatureMap."""
    dims, data = read_tensor(manifest.feature_file(entry))
    if len(dims) != 3:
        raise TensorFormatError(
            f"{entry.feature_path}: expected rank-3 (D, H, W) tensor, got {dims}"
        )
    arr = data.reshape(dims)
    fmap = PatchFeatureMap.from_array(entry.image_id, arr)
    if l2_normalize:
        fmap = normalize_features(fmap)
    return fmap


def normalize_features(fmap: PatchFeatureMap) -> PatchFeatureMap:
    """Per-patch l2 normalization (optional engine-level flag, off by default)."""
    patches = fmap.patches.astype(np.float32)
    norms = np.linalg.norm(patches, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    patches = patches / norms
    arr = patches.reshape(fmap.H_grid, fmap.W_grid, fmap.D).transpose(2, 0, 1)
    return PatchFeatureMap.from_array(fmap.image_id, np.ascontiguousarray(arr))


def load_mask(manifest: DatasetManifest, entry: ManifestEntry) -> PixelMask:
    mask_file = manifest.mask_file(entry)
    if mask_file is None:
        raise ManifestError(f"entry {entry.image_id} has no mask")
    dims, data = read_tensor(mask_file)
    if len(dims) != 2:
        raise TensorFormatError(f"{entry.mask_path}: mask must be rank-2, got {dims}")
    if not np.isin(data, (0.0, 1.0)).all():
        raise TensorFormatError(f"{entry.mask_path}: mask values must be 0 or 1")
    arr = data.reshape(dims).astype(np.uint8)
    arr.flags.writeable = False
    return PixelMask(H0=dims[0], W0=dims[1], data=arr)
