"""Prototype-bank anomaly detection engine with geometry-consistent routing."""

from .bank import PrototypeBank, build_bank, ema_fit_precisions, load_bank, save_bank
from .coreset import CoresetConfig, duplicate_aware_tiebreak, select_coreset
from .feature_store import (DatasetManifest, PatchFeatureMap, PixelMask,
                            load_manifest, read_tensor, write_tensor)
from .harness import ProtocolConfig, bench_throughput, run_continual, run_ksweep
from .metrics import (EvalMatrix, UndefinedMetricError, auroc, average_precision,
                      conditional_auroc, forgetting_measure, overall_fm,
                      pixel_metrics, routing_accuracy)
from .routing import RoutingConfig, RoutingDecision, fuse_topk_max, route, route_score_based
from .scoring import (AnomalyResult, ScoringConfig, energy, head_anomaly_map,
                      patch_distances, score_image, topq_pool, upsample_bilinear)
from .synth import SynthSpec, generate

__version__ = "0.1.0"

__all__ = [
    "AnomalyResult", "CoresetConfig", "DatasetManifest", "EvalMatrix",
    "PatchFeatureMap", "PixelMask", "PrototypeBank", "ProtocolConfig",
    "RoutingConfig", "RoutingDecision", "ScoringConfig", "SynthSpec",
    "UndefinedMetricError", "auroc", "average_precision", "bench_throughput",
    "build_bank", "conditional_auroc", "duplicate_aware_tiebreak",
    "ema_fit_precisions", "energy", "forgetting_measure", "fuse_topk_max",
    "generate", "head_anomaly_map", "load_bank", "load_manifest", "overall_fm",
    "patch_distances", "pixel_metrics", "read_tensor", "route",
    "route_score_based", "routing_accuracy", "run_continual", "run_ksweep",
    "save_bank", "score_image", "select_coreset", "topq_pool",
    "upsample_bilinear", "write_tensor",
]
