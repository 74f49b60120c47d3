"""Time the numba kernels against the pure-numpy fallback.

Runs each backend in a subprocess (the backend is fixed at import time by
GCR_NUMBA), on shapes typical for routing and scoring work.

    python benchmarks/bench_kernels.py            # compare both backends
    GCR_NUMBA=0 python benchmarks/bench_kernels.py --inner  # one backend
"""
import argparse
import json
import os
import subprocess
import sys
import time

SHAPES = [
    # (n_queries, K prototypes, D)
    (196, 64, 768),
    (196, 512, 768),
    (196, 512, 1536),
    (4096, 196, 128),
]
REPEATS = 5


def run_inner() -> None:
    import numpy as np

    from gcr import kernels

    kernels.warmup()
    rng = np.random.default_rng(0)
    rows = []
    for n, k, d in SHAPES:
        q = rng.standard_normal((n, d)).astype(np.float32)
        p = rng.standard_normal((k, d)).astype(np.float32)
        lam = rng.uniform(0.5, 2.0, size=(k, d)).astype(np.float64)
        min_d = np.full(n, np.inf)
        for name, fn in [
            ("min_update", lambda: kernels.min_sqdist_update(q, p[0], min_d)),
            ("nearest_sqdist", lambda: kernels.nearest_sqdist(q, p)),
            ("all_sqdist", lambda: kernels.all_sqdist(q, p)),
            ("aniso_sqdist", lambda: kernels.aniso_sqdist(q, p, lam)),
        ]:
            fn()  # warm cache
            time.sleep(0.05)  # let BLAS workers stop spinning between kernels
            best = min(_timed(fn) for _ in range(REPEATS))
            rows.append({"kernel": name, "n": n, "K": k, "D": d, "ms": best * 1e3})
    print(json.dumps({"backend": kernels.backend_name(), "rows": rows}))


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--inner", action="store_true", help="run one backend and emit JSON")
    args = parser.parse_args()
    if args.inner:
        run_inner()
        return

    results = {}
    for flag in ("1", "0"):
        env = dict(os.environ, GCR_NUMBA=flag)
        out = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--inner"],
            env=env, capture_output=True, text=True, check=True,
        )
        payload = json.loads(out.stdout.strip().splitlines()[-1])
        results[payload["backend"]] = payload["rows"]

    backends = list(results)
    print(f"{'kernel':<16} {'n':>6} {'K':>5} {'D':>6} "
          + "".join(f"{b + ' (ms)':>14}" for b in backends) + f"{'speedup':>10}")
    for i, row in enumerate(results[backends[0]]):
        times = [results[b][i]["ms"] for b in backends]
        ratio = times[1] / times[0] if times[0] > 0 else float("inf")
        print(f"{row['kernel']:<16} {row['n']:>6} {row['K']:>5} {row['D']:>6} "
              + "".join(f"{t:>14.3f}" for t in times) + f"{ratio:>9.2f}x")


if __name__ == "__main__":
    main()
