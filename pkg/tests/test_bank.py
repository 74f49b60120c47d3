import json

import numpy as np
import pytest

from gcr.bank import (BankError, PrototypeBank, bank_checksum, build_bank,
                      ema_fit_precisions, load_bank, save_bank)
from gcr.coreset import CoresetConfig
from gcr.scoring import distance_matrix
from conftest import grid_features, write_dataset


def _bank(protos, log_prec=None, category="cat", weights=None):
    protos = np.asarray(protos, dtype=np.float32)
    k = protos.shape[0]
    w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
    lp = None if log_prec is None else np.asarray(log_prec, dtype=np.float32)
    return PrototypeBank(category, protos, w, lp, {"format_version": 1, "category": category})


def test_build_bank_structural(tmp_path):
    patches = np.array([[0.0], [1.0], [2.0], [3.0]])
    m = write_dataset(tmp_path, [
        {"image_id": "t0", "category": "bolt", "split": "train",
         "features": grid_features(patches, 2, 2)},
    ])
    bank = build_bank(m, "bolt", CoresetConfig(K=2, seed=0))
    assert bank.K == 2 and bank.D == 1
    for proto in bank.prototypes:
        assert any(np.array_equal(proto, p) for p in patches.astype(np.float32))
    assert bank.log_precisions is None
    np.testing.assert_allclose(bank.weights, 0.5)
    assert bank.meta["K_requested"] == 2
    assert bank.meta["seed"] == 0
    assert "source_manifest_hash" in bank.meta


def test_build_bank_rejects_dim_mismatch(tmp_path):
    m = write_dataset(tmp_path, [
        {"image_id": "a", "category": "bolt", "split": "train",
         "features": grid_features(np.ones((4, 2)), 2, 2)},
        {"image_id": "b", "category": "bolt", "split": "train",
         "features": grid_features(np.ones((4, 3)), 2, 2)},
    ])
    with pytest.raises(BankError, match="feature dim mismatch"):
        build_bank(m, "bolt", CoresetConfig(K=2, seed=0))


def test_build_bank_requires_train_images(tmp_path):
    m = write_dataset(tmp_path, [
        {"image_id": "a", "category": "bolt", "split": "test", "label": 0,
         "features": grid_features(np.ones((4, 2)), 2, 2)},
    ])
    with pytest.raises(BankError, match="no train images"):
        build_bank(m, "bolt", CoresetConfig(K=2, seed=0))


def test_build_bank_deterministic(tmp_path, rng):
    m = write_dataset(tmp_path, [
        {"image_id": f"t{i}", "category": "c", "split": "train",
         "features": grid_features(rng.standard_normal((9, 4)), 3, 3)}
        for i in range(3)
    ])
    a = build_bank(m, "c", CoresetConfig(K=5, seed=77))
    b = build_bank(m, "c", CoresetConfig(K=5, seed=77))
    np.testing.assert_array_equal(a.prototypes, b.prototypes)


# ---------------------------------------------------------------------------
# EMA precision fit
# ---------------------------------------------------------------------------

def test_ema_hand_recurrence(tmp_path):
    # single prototype at 0, patches {+1, -1}, decay 0.5, v0 = 1:
    # v = 0.5*(0.5*1 + 0.5*1) + 0.5*1 = 1 -> lambda = 1 -> log 0
    m = write_dataset(tmp_path, [
        {"image_id": "t", "category": "c", "split": "train",
         "features": grid_features(np.array([[1.0], [-1.0]]), 1, 2)},
    ])
    bank = _bank([[0.0]], category="c")
    fitted = ema_fit_precisions(bank, m, decay=0.5, var_floor=1e-6)
    np.testing.assert_allclose(fitted.log_precisions, 0.0, atol=1e-12)


def test_ema_zero_variance_hits_floor(tmp_path):
    value = np.full((32, 3), 2.5)
    m = write_dataset(tmp_path, [
        {"image_id": "t", "category": "c", "split": "train",
         "features": grid_features(value, 4, 8)},
    ])
    bank = build_bank(m, "c", CoresetConfig(K=1, seed=0))
    np.testing.assert_array_equal(bank.prototypes[0], value[0].astype(np.float32))
    fitted = ema_fit_precisions(bank, m, decay=0.5, var_floor=1e-6)
    np.testing.assert_allclose(np.exp(fitted.log_precisions.astype(np.float64)),
                               1e6, rtol=1e-5)


def test_ema_leaves_prototypes_and_weights(tmp_path, rng):
    m = write_dataset(tmp_path, [
        {"image_id": "t", "category": "c", "split": "train",
         "features": grid_features(rng.standard_normal((8, 3)), 2, 4)},
    ])
    bank = build_bank(m, "c", CoresetConfig(K=3, seed=1))
    fitted = ema_fit_precisions(bank, m)
    np.testing.assert_array_equal(fitted.prototypes, bank.prototypes)
    np.testing.assert_array_equal(fitted.weights, bank.weights)
    assert fitted.log_precisions is not None


def test_ema_manifest_order_determinism(tmp_path, rng):
    m = write_dataset(tmp_path, [
        {"image_id": f"t{i}", "category": "c", "split": "train",
         "features": grid_features(rng.standard_normal((6, 2)), 2, 3)}
        for i in range(4)
    ])
    bank = build_bank(m, "c", CoresetConfig(K=4, seed=2))
    a = ema_fit_precisions(bank, m, decay=0.9, var_floor=1e-6)
    b = ema_fit_precisions(bank, m, decay=0.9, var_floor=1e-6)
    np.testing.assert_array_equal(a.log_precisions, b.log_precisions)


def test_ema_parameter_validation(tmp_path):
    m = write_dataset(tmp_path, [
        {"image_id": "t", "category": "c", "split": "train",
         "features": grid_features(np.ones((2, 1)), 1, 2)},
    ])
    bank = build_bank(m, "c", CoresetConfig(K=1, seed=0))
    with pytest.raises(ValueError, match="decay"):
        ema_fit_precisions(bank, m, decay=1.0)
    with pytest.raises(ValueError, match="var_floor"):
        ema_fit_precisions(bank, m, var_floor=0.0)


def test_zero_log_precisions_match_isotropic(rng):
    # identity metric written out explicitly must equal the isotropic path
    # (same quantity through two GEMM expansions, so ulp-level agreement)
    protos = rng.standard_normal((5, 4)).astype(np.float32)
    q = rng.standard_normal((7, 4)).astype(np.float32)
    iso = distance_matrix(q, _bank(protos))
    aniso = distance_matrix(q, _bank(protos, log_prec=np.zeros((5, 4))))
    np.testing.assert_allclose(aniso, iso, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def test_save_load_identity(tmp_path, rng):
    protos = rng.standard_normal((6, 5)).astype(np.float32)
    lp = rng.uniform(-3, 3, size=(6, 5)).astype(np.float32)
    bank = _bank(protos, log_prec=lp, category="widget")
    save_bank(bank, tmp_path / "widget")
    back = load_bank(tmp_path / "widget")
    assert back.category == "widget"
    np.testing.assert_array_equal(back.prototypes, bank.prototypes)
    np.testing.assert_array_equal(back.log_precisions, bank.log_precisions)
    np.testing.assert_array_equal(back.weights, bank.weights)


def test_save_is_reproducible(tmp_path, rng):
    protos = rng.standard_normal((196, 32)).astype(np.float32)
    bank = _bank(protos, category="big")
    save_bank(bank, tmp_path / "a")
    save_bank(load_bank(tmp_path / "a"), tmp_path / "b")
    assert bank_checksum(tmp_path / "a") == bank_checksum(tmp_path / "b")


def test_bank_dir_layout(tmp_path, rng):
    bank = _bank(rng.standard_normal((2, 2)).astype(np.float32))
    fitted = PrototypeBank(bank.category, bank.prototypes, bank.weights,
                           np.zeros((2, 2), dtype=np.float32), bank.meta)
    save_bank(fitted, tmp_path / "cat")
    names = sorted(p.name for p in (tmp_path / "cat").iterdir())
    assert names == ["log_precisions.gcrf", "meta.json", "prototypes.gcrf",
                     "weights.gcrf"]


def test_load_missing_meta(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(BankError, match="missing metadata"):
        load_bank(tmp_path / "empty")


def test_load_rejects_bad_version(tmp_path, rng):
    bank = _bank(rng.standard_normal((2, 2)).astype(np.float32))
    save_bank(bank, tmp_path / "cat")
    meta = json.loads((tmp_path / "cat" / "meta.json").read_text())
    meta["format_version"] = 99
    (tmp_path / "cat" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(BankError, match="version"):
        load_bank(tmp_path / "cat")


def test_invariant_validation(rng):
    protos = rng.standard_normal((3, 2)).astype(np.float32)
    with pytest.raises(BankError, match="sum to 1"):
        _bank(protos, weights=[0.5, 0.5, 0.5])
    with pytest.raises(BankError, match="nonnegative"):
        _bank(protos, weights=[1.5, -0.25, -0.25])
    with pytest.raises(BankError, match="clamp"):
        _bank(protos, log_prec=np.full((3, 2), 25.0))
