"""Sequential category protocol: add one head per step, evaluate all seen
categories task-agnostically after every step, fill the evaluation matrix,
compute forgetting, and run K-sweeps and throughput benchmarks.

Heads are cached on disk keyed by (category, K, seed, manifest hash, ema) and
checksummed at every later step: a frozen head that drifts is a protocol
violation and a hard failure, not a warning.
"""
from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .bank import (PrototypeBank, bank_checksum, build_bank, ema_fit_precisions,
                   load_bank, manifest_hash, save_bank)
from .coreset import CoresetConfig
from .feature_store import DatasetManifest, load_features, load_mask
from .metrics import (EvalMatrix, RoutedRecord, UndefinedMetricError, auroc,
                      average_precision, conditional_auroc, forgetting_measure,
                      overall_fm, pixel_metrics, routing_accuracy)
from .routing import RoutingConfig, RoutingDecision, fuse_topk_max, route, route_score_based
from .scoring import (AnomalyResult, ScoringConfig, head_anomaly_map,
                      result_from_grid, score_image)


class ProtocolError(RuntimeError):
    """Continual-protocol violation (e.g. a frozen head changed on disk)."""


@dataclass(frozen=True)
class ProtocolConfig:
    category_order: Optional[list] = None      # None -> lexicographic
    base_metric: str = "auroc"                  # auroc|p_ap
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    coreset: CoresetConfig = field(default_factory=lambda: CoresetConfig(K=16))
    ema: str = "off"                            # on|off
    K_sweep: Optional[list] = None
    l2_normalize: bool = False
    ema_decay: float = 0.99
    ema_var_floor: float = 1e-6
    threads: int = 1

    def __post_init__(self):
        if self.base_metric not in ("auroc", "p_ap"):
            raise ValueError("base_metric must be auroc|p_ap")
        if self.ema not in ("on", "off"):
            raise ValueError("ema must be on|off")
        if self.category_order is not None:
            if len(set(self.category_order)) != len(self.category_order):
                raise ValueError("category_order has duplicates")


@dataclass(frozen=True)
class ImageEval:
    image_id: str
    true_category: str
    image_label: int
    decision: Optional[RoutingDecision]
    result: AnomalyResult


def resolve_order(manifest: DatasetManifest, cfg: ProtocolConfig) -> list:
    available = manifest.categories()
    if cfg.category_order is None:
        return sorted(available)
    missing = [c for c in cfg.category_order if c not in available]
    if missing:
        raise ValueError(f"categories not in manifest: {missing}")
    return list(cfg.category_order)


# ---------------------------------------------------------------------------
# bank cache with immutability checks
# ---------------------------------------------------------------------------

class BankStore:
    """Builds/loads banks under a cache directory and enforces that every
    head stays byte-identical across steps."""

    def __init__(self, manifest: DatasetManifest, cfg: ProtocolConfig, cache_dir):
        self.manifest = manifest
        self.cfg = cfg
        self.cache_dir = Path(os.environ.get("GCR_CACHE_DIR", cache_dir))
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._hash = manifest_hash(manifest)
        self._checksums: dict[str, str] = {}
        self._banks: dict[str, PrototypeBank] = {}

    def _key(self, category: str, K: int) -> Path:
        ema = "ema" if self.cfg.ema == "on" else "noema"
        name = f"{category}_K{K}_seed{self.cfg.coreset.seed}_{ema}_{self._hash[:12]}"
        return self.cache_dir / name

    def get(self, category: str, K: int = None) -> PrototypeBank:
        K = K if K is not None else self.cfg.coreset.K
        path = self._key(category, K)
        tag = str(path)
        if tag in self._banks:
            self.verify(category, K)
            return self._banks[tag]
        if path.is_dir():
            bank = load_bank(path)
        else:
            bank = build_bank(self.manifest, category,
                              replace(self.cfg.coreset, K=K),
                              l2_normalize=self.cfg.l2_normalize)
            if self.cfg.ema == "on":
                bank = ema_fit_precisions(bank, self.manifest,
                                          decay=self.cfg.ema_decay,
                                          var_floor=self.cfg.ema_var_floor)
            save_bank(bank, path)
        self._banks[tag] = bank
        self._checksums[tag] = bank_checksum(path)
        return bank

    def verify(self, category: str, K: int = None) -> None:
        K = K if K is not None else self.cfg.coreset.K
        path = self._key(category, K)
        tag = str(path)
        if tag in self._checksums and bank_checksum(path) != self._checksums[tag]:
            raise ProtocolError(
                f"frozen head mutated on disk: {path} (checksum drift)"
            )

    def checksum(self, category: str, K: int = None) -> str:
        K = K if K is not None else self.cfg.coreset.K
        return self._checksums[str(self._key(category, K))]


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def infer_image(fmap, banks: dict, cfg: ProtocolConfig, H0: int, W0: int,
                true_category: str = None, oracle: bool = False) -> tuple:
    """Route (or oracle-select) a head and score within it.

    With topk > 1 the selected heads' grid maps are fused by elementwise max
    and the image score pools from the fused map; routed_category stays the
    top-1 head.
    """
    if oracle:
        result = score_image(fmap, banks[true_category], cfg.scoring, H0, W0,
                             routed_category=true_category)
        return None, result
    if cfg.routing.rule == "geometry":
        decision = route(fmap, banks, cfg.routing)
    else:
        decision = route_score_based(fmap, banks, cfg.scoring,
                                     out_hw=(H0, W0), topk=cfg.routing.topk)
    heads = decision.selected
    if len(heads) == 1:
        result = score_image(fmap, banks[heads[0]], cfg.scoring, H0, W0,
                             routed_category=heads[0])
    else:
        grids = [head_anomaly_map(fmap, banks[h], cfg.scoring) for h in heads]
        result = result_from_grid(fuse_topk_max(grids), cfg.scoring, H0, W0,
                                  routed_category=heads[0])
    return decision, result


def evaluate_category(manifest: DatasetManifest, category: str, banks: dict,
                      cfg: ProtocolConfig, oracle: bool = False) -> list:
    """Task-agnostic evaluation of one category's test split."""
    entries = manifest.select(category=category, split="test")
    if not entries:
        raise ValueError(f"no test images for category {category!r}")

    def one(entry):
        fmap = load_features(manifest, entry, l2_normalize=cfg.l2_normalize)
        decision, result = infer_image(fmap, banks, cfg, entry.image_height,
                                       entry.image_width,
                                       true_category=category, oracle=oracle)
        return ImageEval(entry.image_id, category, entry.image_label, decision, result)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            return list(pool.map(one, entries))
    return [one(e) for e in entries]


def _records(evals: list) -> list:
    return [RoutedRecord(e.image_id, e.true_category, e.result.routed_category,
                         e.image_label, e.result.image_score) for e in evals]


def _maybe(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except UndefinedMetricError:
        return "undefined"


def _category_report(manifest, category, evals: list) -> dict:
    scores = [e.result.image_score for e in evals]
    labels = [e.image_label for e in evals]
    records = _records(evals)
    pairs = []
    for e, entry in zip(evals, manifest.select(category=category, split="test")):
        if entry.mask_path is not None:
            pairs.append((e.result.pixel_map, load_mask(manifest, entry)))
    report = {
        "auroc": _maybe(auroc, scores, labels),
        "ap": _maybe(average_precision, scores, labels),
        "routing_accuracy": {
            s: _maybe(routing_accuracy, records, s) for s in ("all", "normal", "anomaly")
        },
        "conditional_auroc": {
            c: _maybe(conditional_auroc, records, c)
            for c in ("routed_correct", "routed_wrong")
        },
    }
    if pairs:
        try:
            p_auroc, p_ap = pixel_metrics(pairs)
            report["p_auroc"], report["p_ap"] = p_auroc, p_ap
        except UndefinedMetricError:
            report["p_auroc"] = report["p_ap"] = "undefined"
    else:
        report["p_auroc"] = report["p_ap"] = "undefined"
    return report


def _base_value(report: dict, base_metric: str) -> float:
    v = report[base_metric if base_metric != "auroc" else "auroc"]
    if v == "undefined":
        raise ProtocolError(f"required base metric {base_metric} undefined")
    return float(v)


# ---------------------------------------------------------------------------
# continual protocol
# ---------------------------------------------------------------------------

def run_continual(manifest: DatasetManifest, cfg: ProtocolConfig, out_dir,
                  write_reports: bool = True) -> tuple:
    """Run the T-step protocol; returns (EvalMatrix, step reports).

    Step t builds (or loads) the bank for category t, verifies all earlier
    heads are byte-identical, and evaluates every category i <= t with
    candidate set = the first t heads.
    """
    out_dir = Path(out_dir)
    report_dir = out_dir / "report"
    if write_reports:
        report_dir.mkdir(parents=True, exist_ok=True)
    order = resolve_order(manifest, cfg)
    store = BankStore(manifest, cfg, out_dir / "banks")
    T = len(order)
    values = np.full((T, T), np.nan)
    step_reports = []

    for t in range(1, T + 1):
        banks = {c: store.get(c) for c in order[:t]}
        for c in order[:t]:
            store.verify(c)
        per_category = {}
        step_evals = []
        for i in range(1, t + 1):
            cat = order[i - 1]
            evals = evaluate_category(manifest, cat, banks, cfg)
            step_evals.extend(evals)
            rep = _category_report(manifest, cat, evals)
            per_category[cat] = rep
            values[i - 1, t - 1] = _base_value(rep, cfg.base_metric)
        if write_reports:
            _write_score_csv(report_dir / f"step_{t}_scores.csv", step_evals)
            _write_routing_csv(report_dir / f"step_{t}_routing.csv", step_evals,
                               order[:t])
        defined = [v for v in (per_category[c]["auroc"] for c in per_category)
                   if v != "undefined"]
        step_report = {
            "step": t,
            "category_added": order[t - 1],
            "candidates": order[:t],
            "config": describe_config(cfg),
            "head_checksums": {c: store.checksum(c) for c in order[:t]},
            "per_category": per_category,
            "mean_auroc": float(np.mean(defined)) if defined else "undefined",
        }
        step_reports.append(step_report)
        if write_reports:
            _dump_json(report_dir / f"step_{t}.json", step_report)

    matrix = EvalMatrix(T=T, values=values)
    if write_reports:
        _write_eval_matrix_csv(report_dir / "eval_matrix.csv", order, matrix)
        _dump_json(report_dir / "fm.json", fm_report(matrix, order, cfg, step_reports))
    return matrix, step_reports


def fm_report(matrix: EvalMatrix, order: list, cfg: ProtocolConfig,
              step_reports: list) -> dict:
    report = {"base_metric": cfg.base_metric, "category_order": order}
    if matrix.T < 2:
        report["overall"] = "undefined"
        report["note"] = "FM requires T >= 2"
        return report
    report["per_category"] = {order[i - 1]: forgetting_measure(matrix, i)
                              for i in range(1, matrix.T)}
    report["overall"] = overall_fm(matrix)
    # secondary matrix over the other base metric, when every cell is defined
    other = "p_ap" if cfg.base_metric == "auroc" else "auroc"
    try:
        vals = np.full((matrix.T, matrix.T), np.nan)
        for t, rep in enumerate(step_reports, start=1):
            for i in range(1, t + 1):
                v = rep["per_category"][order[i - 1]][other]
                if v == "undefined":
                    raise UndefinedMetricError(other)
                vals[i - 1, t - 1] = float(v)
        m2 = EvalMatrix(T=matrix.T, values=vals)
        report["by_metric"] = {other: {
            "per_category": {order[i - 1]: forgetting_measure(m2, i)
                             for i in range(1, m2.T)},
            "overall": overall_fm(m2),
        }}
    except (UndefinedMetricError, ValueError):
        report["by_metric"] = {other: "undefined"}
    return report


# ---------------------------------------------------------------------------
# K-sweep (oracle vs routed) and throughput
# ---------------------------------------------------------------------------

def run_ksweep(manifest: DatasetManifest, cfg: ProtocolConfig, K_list: list,
               out_dir) -> list:
    """Per K: rebuild banks, run the continual protocol, and evaluate both the
    oracle (ground-truth head) and routed pipelines at the final step."""
    if not K_list:
        raise ValueError("K_list must be nonempty")
    out_dir = Path(out_dir)
    report_dir = out_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    cfg = replace(cfg, base_metric="auroc")  # the sweep tables are image AUROC
    order = resolve_order(manifest, cfg)
    rows = []
    for K in K_list:
        cfg_k = replace(cfg, coreset=replace(cfg.coreset, K=int(K)))
        matrix, _ = run_continual(manifest, cfg_k, out_dir / f"K_{K}",
                                  write_reports=False)
        store = BankStore(manifest, cfg_k, out_dir / f"K_{K}" / "banks")
        banks = {c: store.get(c) for c in order}
        fms = ({order[i - 1]: forgetting_measure(matrix, i) for i in range(1, matrix.T)}
               if matrix.T >= 2 else {})
        for idx, cat in enumerate(order, start=1):
            oracle_evals = evaluate_category(manifest, cat, banks, cfg_k, oracle=True)
            o_auroc = _maybe(auroc, [e.result.image_score for e in oracle_evals],
                             [e.image_label for e in oracle_evals])
            routed_val = matrix.get(idx, matrix.T)
            rows.append({
                "K": int(K),
                "category": cat,
                "oracle_auroc": o_auroc,
                "routed_auroc": routed_val,
                "fm": fms.get(cat, ""),
            })
        defined_o = [r["oracle_auroc"] for r in rows
                     if r["K"] == int(K) and r["oracle_auroc"] != "undefined"]
        rows.append({
            "K": int(K),
            "category": "MEAN",
            "oracle_auroc": float(np.mean(defined_o)),
            "routed_auroc": float(np.mean([matrix.get(i, matrix.T)
                                           for i in range(1, matrix.T + 1)])),
            "fm": (overall_fm(matrix) if matrix.T >= 2 else ""),
        })
    _write_csv(report_dir / "ksweep.csv",
               ["K", "category", "oracle_auroc", "routed_auroc", "fm"], rows)
    return rows


def throughput_from_timings(dts: list) -> dict:
    """FPS = N / sum(dt); latency_ms = 1000 / FPS."""
    total = float(sum(dts))
    if not dts or total <= 0.0:
        raise ValueError("no timed iterations")
    fps = len(dts) / total
    return {"fps": fps, "latency_ms": 1000.0 / fps, "num_images": len(dts)}


def bench_throughput(manifest: DatasetManifest, cfg: ProtocolConfig, warmup: int = 3,
                     K_list: list = None, out_dir=None) -> dict:
    """Time feature-load-excluded forward work (routing + scoring of the
    routed head) per test image, single-in-flight.

    Warm-up iterations run the same forward path but are excluded from the
    accumulated time. K_list adds per-K rows over rebuilt banks.
    """
    import tempfile

    from . import kernels
    kernels.warmup()
    order = resolve_order(manifest, cfg)
    entries = manifest.select(split="test")
    if not entries:
        raise ValueError("no test images")
    loaded = [(load_features(manifest, e, l2_normalize=cfg.l2_normalize), e)
              for e in entries]
    cache_root = Path(out_dir) / "banks" if out_dir is not None \
        else Path(tempfile.mkdtemp(prefix="gcr_bench_"))

    def run_at(K: int) -> dict:
        cfg_k = replace(cfg, coreset=replace(cfg.coreset, K=int(K)))
        store = BankStore(manifest, cfg_k, cache_root)
        banks = {c: store.get(c, K=int(K)) for c in order}
        for fmap, e in loaded[:max(warmup, 1)]:
            infer_image(fmap, banks, cfg_k, e.image_height, e.image_width,
                        true_category=e.category)
        dts = []
        for fmap, e in loaded:
            t0 = time.perf_counter()
            infer_image(fmap, banks, cfg_k, e.image_height, e.image_width,
                        true_category=e.category)
            dts.append(time.perf_counter() - t0)
        row = throughput_from_timings(dts)
        row["K"] = int(K)
        return row

    result = run_at(cfg.coreset.K)
    result["warmup"] = int(warmup)
    result["kernel_backend"] = kernels.backend_name()
    if K_list:
        result["per_K"] = [run_at(k) for k in K_list]
    if out_dir is not None:
        report_dir = Path(out_dir) / "report"
        report_dir.mkdir(parents=True, exist_ok=True)
        _dump_json(report_dir / "bench.json", result)
    return result


# ---------------------------------------------------------------------------
# report plumbing
# ---------------------------------------------------------------------------

def describe_config(cfg: ProtocolConfig) -> dict:
    return {
        "base_metric": cfg.base_metric,
        "routing": vars(cfg.routing).copy(),
        "scoring": vars(cfg.scoring).copy(),
        "coreset": {"K": cfg.coreset.K, "seed": cfg.coreset.seed},
        "ema": cfg.ema,
        "l2_normalize": cfg.l2_normalize,
    }


def _dump_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _write_score_csv(path, evals: list) -> None:
    rows = [{
        "image_id": e.image_id,
        "category": e.true_category,
        "routed": e.result.routed_category,
        "score": f"{e.result.image_score:.12g}",
        "label": e.image_label,
    } for e in evals]
    _write_csv(path, ["image_id", "category", "routed", "score", "label"], rows)


def _write_routing_csv(path, evals: list, candidates: list) -> None:
    fields = ["image_id", "true_category", "routed"] + [f"r_{c}" for c in candidates]
    rows = []
    for e in evals:
        row = {
            "image_id": e.image_id,
            "true_category": e.true_category,
            "routed": e.result.routed_category,
        }
        dists = e.decision.distances if e.decision is not None else {}
        for c in candidates:
            row[f"r_{c}"] = f"{dists[c]:.12g}" if c in dists else ""
        rows.append(row)
    _write_csv(path, fields, rows)


def _write_eval_matrix_csv(path, order, matrix: EvalMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["category"] + [f"step_{t}" for t in range(1, matrix.T + 1)])
        for i, cat in enumerate(order, start=1):
            row = [cat]
            for t in range(1, matrix.T + 1):
                row.append(f"{matrix.get(i, t):.6f}" if i <= t else "")
            writer.writerow(row)
