"""Acceptance suite: one test per gating criterion, each printing a pass line
(run with -s to see them). Everything here runs on synthetic or randomized
data; no real datasets or pretrained weights are involved."""
import json
import math
import time

import numpy as np
import pytest

from gcr.bank import bank_checksum
from gcr.coreset import CoresetConfig, select_coreset
from gcr.feature_store import PatchFeatureMap
from gcr.harness import BankStore, ProtocolConfig, evaluate_category, run_continual, bench_throughput
from gcr.metrics import (EvalMatrix, auroc, average_precision, forgetting_measure,
                         overall_fm, routing_accuracy, RoutedRecord)
from gcr.routing import RoutingConfig, route, select_by_distance
from gcr.scoring import ScoringConfig, aggregate_energies, head_anomaly_map, topq_pool
from gcr.synth import SynthSpec, generate, generate_scale_mismatch

from conftest import grid_features
from test_bank import _bank
from test_coreset import rescan_oracle
from test_metrics import pairwise_auroc_oracle, threshold_sweep_ap_oracle


def _ok(name):
    print(f"[PASS] {name}")


# separation at 20x the intra-category std, 5 categories, 40 test images each
WELL_SEPARATED = SynthSpec(num_categories=5, images_per_split=(12, 40),
                           mean_separation=1.0, intra_std=0.05,
                           anomaly_shift=1.0, seed=29)

SCALE_MISMATCH = SynthSpec(num_categories=5, images_per_split=(10, 16),
                           mean_separation=1.0, intra_std=0.05,
                           anomaly_shift=3.0, seed=11)


@pytest.fixture(scope="module")
def separated(tmp_path_factory):
    return generate(WELL_SEPARATED, tmp_path_factory.mktemp("sep"))


def test_coreset_oracle_equivalence(rng):
    t0 = time.perf_counter()
    for _ in range(200):
        n = int(rng.integers(1, 201))
        d = int(rng.integers(1, 9))
        k = int(rng.integers(1, 17))
        seed = int(rng.integers(0, 2**63))
        feats = rng.standard_normal((n, d)).astype(np.float32)
        if n >= 3 and rng.random() < 0.3:
            feats[n // 2] = feats[0]
        got, _ = select_coreset(feats, CoresetConfig(K=k, seed=seed))
        assert got == rescan_oracle(feats, k, seed)
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    _ok(f"coreset oracle equivalence (200 instances, {elapsed:.2f}s)")


def test_auroc_ap_oracle_equivalence(rng):
    t0 = time.perf_counter()
    for _ in range(500):
        n = int(rng.integers(2, 51))
        scores = rng.standard_normal(n)
        if rng.random() < 0.6:
            scores = np.round(scores, 1)  # force ties
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[-1] = 1, 0
        assert auroc(scores, labels) == pytest.approx(
            pairwise_auroc_oracle(scores, labels), abs=1e-12)
        assert average_precision(scores, labels) == pytest.approx(
            threshold_sweep_ap_oracle(scores, labels), abs=1e-12)
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0
    _ok(f"AUROC/AP oracle equivalence (500 sets, {elapsed:.2f}s)")


def test_lse_bracket_bound(rng):
    violations = 0
    for _ in range(10_000):
        k = int(rng.integers(1, 65))
        tau = float(rng.uniform(1e-3, 10.0))
        d = rng.uniform(0.0, 100.0, size=(1, k))
        e = aggregate_energies(d, np.full(k, 1.0 / k), ScoringConfig(tau=tau))[0]
        lhs = abs(2.0 * tau * e - d.min())
        # algebraic bound; the epsilon only absorbs final-rounding ulps
        if lhs > 2.0 * tau * math.log(k) + 1e-9 * (1.0 + d.min()):
            violations += 1
    assert violations == 0
    _ok("LSE bracket bound (10^4 draws, zero violations)")


def test_scoring_form_invariance(rng, tmp_path):
    for _ in range(100):
        k = int(rng.integers(1, 17))
        d = int(rng.integers(1, 9))
        protos = rng.standard_normal((k, d)).astype(np.float32)
        lp = rng.uniform(-2, 2, size=(k, d)).astype(np.float32)
        bank = _bank(protos, log_prec=lp)
        n = int(rng.integers(2, 33))
        q = rng.standard_normal((n, d)).astype(np.float32)
        fm = PatchFeatureMap.from_array("q", grid_features(q, 1, n))
        orders = []
        for form in ("energy", "nll"):
            grid = head_anomaly_map(fm, bank, ScoringConfig(form=form))
            orders.append(np.argsort(grid, axis=None, kind="stable"))
        assert np.array_equal(orders[0], orders[1])

    spec = SynthSpec(num_categories=3, images_per_split=(6, 10), seed=17)
    manifest = generate(spec, tmp_path / "data")
    aurocs = {}
    for form in ("energy", "nll"):
        cfg = ProtocolConfig(coreset=CoresetConfig(K=8, seed=2),
                             scoring=ScoringConfig(form=form), ema="on")
        _, steps = run_continual(manifest, cfg, tmp_path / form, write_reports=False)
        aurocs[form] = {c: r["auroc"] for c, r in steps[-1]["per_category"].items()}
    for cat in aurocs["energy"]:
        assert abs(aurocs["energy"][cat] - aurocs["nll"][cat]) <= 1e-12
    _ok("scoring-form invariance (100 banks exact ordering; run AUROC diff <= 1e-12)")


def _final_step_records(manifest, cfg):
    store = BankStore(manifest, cfg, manifest.root / f"banks_{cfg.routing.rule}")
    banks = {c: store.get(c) for c in manifest.categories()}
    records = []
    for cat in manifest.categories():
        for ev in evaluate_category(manifest, cat, banks, cfg):
            records.append(RoutedRecord(ev.image_id, cat, ev.result.routed_category,
                                        ev.image_label, ev.result.image_score))
    return records


def test_routing_rule_ablation_surrogate(tmp_path, separated):
    mismatch = generate_scale_mismatch(SCALE_MISMATCH, tmp_path / "mm", factor=10.0)
    accs = {}
    for rule in ("geometry", "score_based"):
        cfg = ProtocolConfig(coreset=CoresetConfig(K=16, seed=3),
                             routing=RoutingConfig(rule=rule))
        accs[rule] = routing_accuracy(_final_step_records(mismatch, cfg))
    assert accs["geometry"] == 1.0
    assert accs["score_based"] < 1.0

    cfg = ProtocolConfig(coreset=CoresetConfig(K=16, seed=3))
    assert WELL_SEPARATED.mean_separation >= 20 * WELL_SEPARATED.intra_std
    acc = routing_accuracy(_final_step_records(separated, cfg))
    assert acc == 1.0
    _ok(f"routing-rule ablation surrogate (geometry 1.0 vs score-based "
        f"{accs['score_based']:.3f}; separated set 1.0)")


def test_continual_zero_forgetting(tmp_path, separated):
    t0 = time.perf_counter()
    cfg = ProtocolConfig(coreset=CoresetConfig(K=16, seed=5))
    matrix, steps = run_continual(separated, cfg, tmp_path / "run")
    T = matrix.T
    assert T == 5
    for i in range(1, T + 1):
        row = [matrix.get(i, t) for t in range(i, T + 1)]
        assert all(v == row[0] for v in row)  # P_i^(t) constant in t
    assert overall_fm(matrix) == 0.0
    for cat in steps[0]["head_checksums"]:
        sums = {s["head_checksums"][cat] for s in steps if cat in s["head_checksums"]}
        assert len(sums) == 1
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    _ok(f"continual zero forgetting (5 categories, FM = 0.0, {elapsed:.1f}s)")


def test_routed_equals_oracle_bit_exact(tmp_path, separated):
    cfg = ProtocolConfig(coreset=CoresetConfig(K=16, seed=5))
    store = BankStore(separated, cfg, tmp_path / "banks")
    banks = {c: store.get(c) for c in separated.categories()}
    compared = 0
    for cat in separated.categories():
        routed = evaluate_category(separated, cat, banks, cfg)
        oracle = evaluate_category(separated, cat, banks, cfg, oracle=True)
        for r, o in zip(routed, oracle):
            if r.result.routed_category == cat:
                assert r.result.grid_map.tobytes() == o.result.grid_map.tobytes()
                assert r.result.pixel_map.tobytes() == o.result.pixel_map.tobytes()
                assert r.result.image_score == o.result.image_score
                compared += 1
    assert compared > 0
    _ok(f"routed == oracle bit-exact ({compared} images)")


def test_sum_mean_and_scale_decision_invariance(rng):
    for _ in range(1000):
        n_cands = int(rng.integers(1, 8))
        dists = {f"c{i}": float(rng.uniform(0, 1000)) for i in range(n_cands)}
        lam = float(10.0 ** rng.uniform(-6, 6))
        topk = int(rng.integers(1, n_cands + 1))
        base = select_by_distance(dists, topk)
        assert base == select_by_distance({c: lam * v for c, v in dists.items()}, topk)
        n_patches = 7
        assert base == select_by_distance({c: v / n_patches for c, v in dists.items()}, topk)
    for _ in range(50):
        fmap = PatchFeatureMap.from_array(
            "x", grid_features(rng.standard_normal((12, 4)).astype(np.float32), 3, 4))
        banks = {f"c{i}": _bank(rng.standard_normal((4, 4)).astype(np.float32))
                 for i in range(int(rng.integers(2, 5)))}
        s = route(fmap, banks, RoutingConfig(normalize="sum", topk=len(banks)))
        m = route(fmap, banks, RoutingConfig(normalize="mean", topk=len(banks)))
        assert s.selected == m.selected
    _ok("sum/mean + positive-scale decision invariance (1000 + 50 instances)")


def test_fm_hand_example():
    vals = np.full((3, 3), np.nan)
    vals[0, :] = [0.9, 0.95, 0.9]
    vals[1, 1:] = [0.8, 0.8]
    vals[2, 2] = 0.7
    matrix = EvalMatrix(T=3, values=vals)
    assert forgetting_measure(matrix, 1) == pytest.approx(0.05, abs=1e-15)
    assert forgetting_measure(matrix, 2) == 0.0
    assert overall_fm(matrix) == pytest.approx(0.025, abs=1e-15)
    _ok("FM formula hand example (0.05 / 0.0 / 0.025)")


def test_throughput_trend(tmp_path):
    # heavier shapes so per-image work dominates timer noise; best of three
    # sweeps guards against scheduler spikes on shared machines (each sweep
    # still reports the exact N / sum(dt) formula)
    spec = SynthSpec(num_categories=3, D=96, grid=(12, 12),
                     images_per_split=(4, 10), mean_separation=1.0,
                     intra_std=0.05, seed=31)
    manifest = generate(spec, tmp_path / "data")
    cfg = ProtocolConfig(coreset=CoresetConfig(K=16, seed=1))
    best = None
    for _ in range(3):
        result = bench_throughput(manifest, cfg, warmup=5, K_list=[16, 64, 256],
                                  out_dir=tmp_path)
        for row in result["per_K"]:
            assert row["latency_ms"] == pytest.approx(1000.0 / row["fps"], abs=1e-9)
        lats = [row["latency_ms"] for row in result["per_K"]]
        best = lats if best is None else [min(a, b) for a, b in zip(best, lats)]
    assert best[0] <= best[1] <= best[2]
    _ok(f"throughput trend K=16/64/256 latency {best[0]:.3f} <= {best[1]:.3f} "
        f"<= {best[2]:.3f} ms")


def test_topq_pooling_examples():
    values = np.arange(1.0, 101.0)
    assert topq_pool(values, 0.01) == 100.0
    assert topq_pool(values, 0.05) == 98.0
    assert topq_pool(values, 1.0) == pytest.approx(50.5, abs=1e-12)
    _ok("top-q pooling (0.01 -> 100, 0.05 -> 98, 1.0 -> mean)")
