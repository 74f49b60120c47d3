"""Command-line surface: build-bank, score, route, eval-continual, ksweep,
bench, synth.

Config precedence is CLI flag > --config JSON file > built-in default, and
every source of randomness flows from explicit seeds, so re-running a command
on the same inputs produces byte-identical reports. Exit codes: 0 success,
1 runtime/protocol error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from .bank import build_bank, ema_fit_precisions, load_bank, save_bank
from .coreset import CoresetConfig
from .feature_store import (PatchFeatureMap, load_manifest, read_tensor, write_tensor)
from .harness import (ProtocolConfig, bench_throughput, infer_image, run_continual,
                      run_ksweep)
from .metrics import overall_fm
from .routing import RoutingConfig, route
from .scoring import ScoringConfig
from .synth import SynthSpec, generate, generate_scale_mismatch

# defaults mirror the evaluation setup: top-1 routing, top-1% pooling,
# LSE aggregation with uniform weights
RUN_DEFAULTS = {
    "K": 16,
    "seed": 0,
    "routing": "geometry",
    "normalize": "mean",
    "scoring": "energy",
    "agg": "lse",
    "tau": 1.0,
    "top_Ke": None,
    "topq": 0.01,
    "topk": 1,
    "subsample_M": None,
    "ema": "off",
    "ema_decay": 0.99,
    "ema_var_floor": 1e-6,
    "base_metric": "auroc",
    "order": None,
    "l2_normalize": False,
    "threads": os.cpu_count() or 1,
}


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """CLI flag > config file > built-in default; unknown file keys rejected."""
    file_cfg = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as f:
            file_cfg = json.load(f)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise SystemExit(f"error: unknown config keys {sorted(unknown)}")
    merged = {}
    for key, default in defaults.items():
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            merged[key] = cli_val
        elif key in file_cfg:
            merged[key] = file_cfg[key]
        else:
            merged[key] = default
    return merged


def _protocol_config(cfg: dict) -> ProtocolConfig:
    order = cfg["order"]
    if isinstance(order, str):
        order = [c for c in order.split(",") if c]
    return ProtocolConfig(
        category_order=order,
        base_metric=cfg["base_metric"],
        routing=RoutingConfig(
            rule=cfg["routing"].replace("-", "_"),
            normalize=cfg["normalize"],
            subsample_M=cfg["subsample_M"],
            subsample_seed=cfg["seed"],
            topk=cfg["topk"],
        ),
        scoring=ScoringConfig(
            form=cfg["scoring"],
            aggregation=cfg["agg"],
            tau=cfg["tau"],
            top_Ke=cfg["top_Ke"],
            topq=cfg["topq"],
        ),
        coreset=CoresetConfig(K=cfg["K"], seed=cfg["seed"]),
        ema=cfg["ema"],
        l2_normalize=bool(cfg["l2_normalize"]),
        ema_decay=cfg["ema_decay"],
        ema_var_floor=cfg["ema_var_floor"],
        threads=int(cfg["threads"]),
    )


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--K", type=int, help="prototypes per bank (default 16)")
    p.add_argument("--seed", type=int, help="seed for coreset pick and subsampling (default 0)")
    p.add_argument("--routing", choices=["geometry", "score-based"],
                   help="routing rule (default geometry)")
    p.add_argument("--normalize", choices=["sum", "mean"],
                   help="routing distance normalization (default mean; decision identical)")
    p.add_argument("--scoring", choices=["energy", "nll"],
                   help="scoring form (default energy; ranking-equivalent)")
    p.add_argument("--agg", choices=["lse", "min"], help="aggregation (default lse)")
    p.add_argument("--tau", type=float, help="temperature (default 1.0)")
    p.add_argument("--top-Ke", dest="top_Ke", type=int,
                   help="restrict LSE to nearest K_e prototypes")
    p.add_argument("--topq", type=float, help="top-q pooling fraction (default 0.01)")
    p.add_argument("--topk", type=int, help="routed heads to fuse (default 1)")
    p.add_argument("--subsample-M", dest="subsample_M", type=int,
                   help="routing patch subsample size (default: all patches)")
    p.add_argument("--ema", choices=["on", "off"],
                   help="EMA precision adaptation (default off)")
    p.add_argument("--ema-decay", dest="ema_decay", type=float)
    p.add_argument("--ema-var-floor", dest="ema_var_floor", type=float)
    p.add_argument("--base-metric", dest="base_metric", choices=["auroc", "p_ap"],
                   help="metric filling the eval matrix (default auroc)")
    p.add_argument("--order", help="comma-separated category arrival order "
                                   "(default lexicographic)")
    p.add_argument("--l2-normalize", dest="l2_normalize", action="store_const",
                   const=True, help="l2-normalize patch features (default off)")
    p.add_argument("--threads", type=int, help="evaluation worker cap "
                                               "(default: available parallelism)")


def _load_banks_dir(path) -> dict:
    path = Path(path)
    banks = {}
    for sub in sorted(path.iterdir()):
        if (sub / "meta.json").is_file():
            bank = load_bank(sub)
            banks[bank.category] = bank
    if not banks:
        raise SystemExit(f"error: no banks under {path}")
    return banks


def _load_feature_file(path) -> PatchFeatureMap:
    dims, data = read_tensor(path)
    if len(dims) != 3:
        raise SystemExit(f"error: {path} is not a (D, H, W) feature tensor")
    return PatchFeatureMap.from_array(Path(path).stem, data.reshape(dims))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_build_bank(args) -> int:
    if args.K is not None and args.K < 1:
        raise SystemExit("error: --K must be >= 1")
    cfg = CoresetConfig(K=args.K if args.K is not None else RUN_DEFAULTS["K"],
                        seed=args.seed if args.seed is not None else 0)
    manifest = load_manifest(args.manifest)
    bank = build_bank(manifest, args.category, cfg,
                      l2_normalize=bool(args.l2_normalize))
    if args.ema == "on":
        bank = ema_fit_precisions(bank, manifest,
                                  decay=args.ema_decay if args.ema_decay is not None else 0.99,
                                  var_floor=args.ema_var_floor if args.ema_var_floor is not None else 1e-6)
    out = Path(args.out) / args.category
    save_bank(bank, out)
    print(f"built bank {args.category}: K={bank.K} D={bank.D} -> {out}")
    return 0


def cmd_score(args) -> int:
    banks = _load_banks_dir(args.banks)
    fmap = _load_feature_file(args.image_features)
    cfg = _protocol_config(_merge_config(args, RUN_DEFAULTS))
    h0 = args.height if args.height is not None else fmap.H_grid
    w0 = args.width if args.width is not None else fmap.W_grid
    decision, result = infer_image(fmap, banks, cfg, h0, w0)
    print(f"routed: {result.routed_category}")
    print(f"image_score: {result.image_score:.9g}")
    if args.out_map:
        write_tensor(args.out_map, result.pixel_map.shape,
                     result.pixel_map.astype(np.float32))
        print(f"pixel map -> {args.out_map}")
    return 0


def cmd_route(args) -> int:
    banks = _load_banks_dir(args.banks)
    fmap = _load_feature_file(args.image_features)
    cfg = _protocol_config(_merge_config(args, RUN_DEFAULTS))
    decision = route(fmap, banks, cfg.routing)
    for cat in sorted(decision.distances):
        print(f"r[{cat}] = {decision.distances[cat]:.9g}")
    print(f"selected: {','.join(decision.selected)}")
    return 0


def cmd_eval_continual(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = _protocol_config(_merge_config(args, RUN_DEFAULTS))
    matrix, steps = run_continual(manifest, cfg, args.out)
    final = steps[-1]
    print(f"steps: {matrix.T}")
    print(f"final mean image AUROC: {final['mean_auroc']}")
    if matrix.T >= 2:
        print(f"FM ({cfg.base_metric}): {overall_fm(matrix):.6f}")
    else:
        print("FM: undefined (T < 2)")
    print(f"reports -> {Path(args.out) / 'report'}")
    return 0


def cmd_ksweep(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = _protocol_config(_merge_config(args, RUN_DEFAULTS))
    K_list = [int(k) for k in args.K_list.split(",") if k]
    rows = run_ksweep(manifest, cfg, K_list, args.out)
    for row in rows:
        if row["category"] == "MEAN":
            print(f"K={row['K']}: oracle={row['oracle_auroc']:.4f} "
                  f"routed={row['routed_auroc']:.4f} fm={row['fm']}")
    print(f"reports -> {Path(args.out) / 'report'}")
    return 0


def cmd_bench(args) -> int:
    manifest = load_manifest(args.manifest)
    K_list = [int(k) for k in args.K.split(",") if k] if args.K else None
    args.K = None  # bench's --K is the sweep list, not the run default
    merged = _merge_config(args, RUN_DEFAULTS)
    if K_list:
        merged["K"] = K_list[0]
    cfg = _protocol_config(merged)
    result = bench_throughput(manifest, cfg, warmup=args.warmup,
                              K_list=K_list, out_dir=args.out)
    rows = result.get("per_K", [result])
    for row in rows:
        print(f"K={row.get('K', cfg.coreset.K)}: fps={row['fps']:.2f} "
              f"latency_ms={row['latency_ms']:.4f}")
    return 0


def cmd_synth(args) -> int:
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as f:
            raw = json.load(f)
        known = {f.name for f in dc_fields(SynthSpec)}
        unknown = set(raw) - known
        if unknown:
            raise SystemExit(f"error: unknown synth spec keys {sorted(unknown)}")
        for key in ("grid", "images_per_split"):
            if key in raw:
                raw[key] = tuple(raw[key])
        spec = SynthSpec(**raw)
    else:
        spec = SynthSpec()
    if args.seed is not None:
        from dataclasses import replace
        spec = replace(spec, seed=args.seed)
    if args.scale_mismatch is not None:
        manifest = generate_scale_mismatch(spec, args.out, factor=args.scale_mismatch)
    else:
        manifest = generate(spec, args.out)
    print(f"generated {len(manifest.entries)} entries across "
          f"{len(manifest.categories())} categories -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcr",
        description="Prototype-bank anomaly detection with geometry-consistent routing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-bank", help="build one category's prototype bank")
    p.add_argument("--manifest", required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--K", type=int, help="prototypes (default 16)")
    p.add_argument("--seed", type=int, help="coreset seed (default 0)")
    p.add_argument("--out", required=True, help="output directory for banks")
    p.add_argument("--ema", choices=["on", "off"], default="off")
    p.add_argument("--ema-decay", dest="ema_decay", type=float)
    p.add_argument("--ema-var-floor", dest="ema_var_floor", type=float)
    p.add_argument("--l2-normalize", dest="l2_normalize", action="store_true")
    p.set_defaults(fn=cmd_build_bank)

    p = sub.add_parser("score", help="route one image's features and score it")
    p.add_argument("--image-features", dest="image_features", required=True)
    p.add_argument("--banks", required=True, help="directory of bank subdirectories")
    p.add_argument("--height", type=int, help="output map height (default: grid)")
    p.add_argument("--width", type=int, help="output map width (default: grid)")
    p.add_argument("--out-map", dest="out_map", help="write pixel map as GCRF")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("route", help="print routing distances for one image")
    p.add_argument("--image-features", dest="image_features", required=True)
    p.add_argument("--banks", required=True)
    _add_run_flags(p)
    p.set_defaults(fn=cmd_route)

    p = sub.add_parser("eval-continual", help="run the sequential-category protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_run_flags(p)
    p.set_defaults(fn=cmd_eval_continual)

    p = sub.add_parser("ksweep", help="oracle vs routed evaluation across K")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--K-list", dest="K_list", required=True,
                   help="comma-separated K values, e.g. 16,64,256")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_ksweep)

    p = sub.add_parser("bench", help="forward-pass throughput (FPS / latency)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write report/bench.json here")
    p.add_argument("--K", dest="K", help="comma-separated K values, e.g. 16,512")
    p.add_argument("--warmup", type=int, default=3)
    _add_run_flags_for_bench(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="JSON file with SynthSpec fields")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--scale-mismatch", dest="scale_mismatch", type=float,
                   help="inflate the first category's features by this factor")
    p.set_defaults(fn=cmd_synth)

    return parser


def _add_run_flags_for_bench(p: argparse.ArgumentParser) -> None:
    # bench reuses the run flags except --K, which takes the comma list
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--routing", choices=["geometry", "score-based"])
    p.add_argument("--normalize", choices=["sum", "mean"])
    p.add_argument("--scoring", choices=["energy", "nll"])
    p.add_argument("--agg", choices=["lse", "min"])
    p.add_argument("--tau", type=float)
    p.add_argument("--top-Ke", dest="top_Ke", type=int)
    p.add_argument("--topq", type=float)
    p.add_argument("--topk", type=int)
    p.add_argument("--subsample-M", dest="subsample_M", type=int)
    p.add_argument("--ema", choices=["on", "off"])
    p.add_argument("--ema-decay", dest="ema_decay", type=float)
    p.add_argument("--ema-var-floor", dest="ema_var_floor", type=float)
    p.add_argument("--base-metric", dest="base_metric", choices=["auroc", "p_ap"])
    p.add_argument("--order")
    p.add_argument("--l2-normalize", dest="l2_normalize", action="store_const", const=True)
    p.add_argument("--threads", type=int)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except BrokenPipeError:
        return 1
    except Exception as e:  # runtime and protocol errors -> exit 1
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
