import numpy as np
import pytest

from gcr.feature_store import load_manifest, save_manifest, write_tensor


def write_dataset(root, images):
    """Write a hand-made dataset and return its validated manifest.

    images: iterable of dicts with keys
        image_id, category, split, label, features ((D, H, W) array),
        and optional mask ((H0, W0) {0,1} array). H0/W0 default to the
        mask shape or the feature grid.
    """
    root.mkdir(parents=True, exist_ok=True)
    (root / "features").mkdir(exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    rows = []
    for im in images:
        feat = np.asarray(im["features"], dtype=np.float32)
        d, h, w = feat.shape
        feature_path = f"features/{im['image_id']}.gcrf"
        write_tensor(root / feature_path, [d, h, w], feat)
        mask = im.get("mask")
        if mask is not None:
            mask = np.asarray(mask, dtype=np.float32)
            mask_path = f"masks/{im['image_id']}.gcrf"
            write_tensor(root / mask_path, list(mask.shape), mask)
            h0, w0 = mask.shape
        else:
            mask_path = None
            h0 = im.get("H0", h)
            w0 = im.get("W0", w)
        rows.append({
            "image_id": im["image_id"],
            "category": im["category"],
            "split": im["split"],
            "image_label": int(im.get("label", 0)),
            "feature_path": feature_path,
            "mask_path": mask_path,
            "image_height": int(h0),
            "image_width": int(w0),
        })
    save_manifest(root / "manifest.jsonl", rows)
    return load_manifest(root / "manifest.jsonl")


def grid_features(patches, h, w):
    """(N, D) patch rows -> (D, h, w) channel-major tensor."""
    patches = np.asarray(patches, dtype=np.float32)
    n, d = patches.shape
    assert n == h * w
    return np.ascontiguousarray(patches.reshape(h, w, d).transpose(2, 0, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
