"""Hot numeric kernels: batched squared-L2 distances against prototype banks.

Two interchangeable backends:

* numba ``@njit`` kernels (default when numba imports cleanly), and
* a pure-numpy fallback, selected by setting the env var ``GCR_NUMBA`` to
  ``0``/``false``/``off`` before the first import.

The batched kernels are GEMM-bound at routing/scoring shapes, so both
backends push the |q|^2 - 2 q.mu + |mu|^2 expansion through BLAS; the numba
versions fuse the norm/clamp/min epilogues into single serial loops instead
of materializing numpy temporaries. Everything outside np.dot stays serial
on purpose: BLAS already owns the cores, and interleaving numba parallel
regions with spinning BLAS workers costs far more than the loops themselves.
The coreset update is a direct-difference loop (rank-1 shape, no BLAS to
call, and numpy needs an (n, D) temporary per call there).

Each backend is deterministic on its own; cross-backend bit equality is not
promised. Distances accumulate in float64 regardless of the float32 inputs.

``python benchmarks/bench_kernels.py`` times the two backends side by side.
"""
from __future__ import annotations

import os

import numpy as np


def _env_wants_numba() -> bool:
    v = os.environ.get("GCR_NUMBA", "1").strip().lower()
    return v not in ("0", "false", "off", "no")


USE_NUMBA = False
if _env_wants_numba():
    try:
        from numba import njit

        USE_NUMBA = True
    except ImportError:
        USE_NUMBA = False


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


def _as64(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if USE_NUMBA:

    @njit(cache=True, nogil=True)
    def _nb_min_sqdist_update(x, center, min_d):
        # min_d[i] <- min(min_d[i], ||x[i] - center||^2). Rows are
        # independent, so this could shard across threads with a fixed-order
        # merge, but at coreset shapes the loop is memory-bound and a serial
        # pass avoids thread-pool variance entirely.
        n, d = x.shape
        for i in range(n):
            acc = 0.0
            for j in range(d):
                diff = np.float64(x[i, j]) - np.float64(center[j])
                acc += diff * diff
            if acc < min_d[i]:
                min_d[i] = acc

    @njit(cache=True, nogil=True)
    def _nb_nearest_sqdist(q64, p64, out_d, out_k):
        n, d = q64.shape
        k = p64.shape[0]
        g = np.dot(q64, p64.T)
        pp = np.empty(k, dtype=np.float64)
        for m in range(k):
            acc = 0.0
            for j in range(d):
                acc += p64[m, j] * p64[m, j]
            pp[m] = acc
        for i in range(n):
            qq = 0.0
            for j in range(d):
                qq += q64[i, j] * q64[i, j]
            best = np.inf
            best_k = 0
            for m in range(k):
                v = qq + pp[m] - 2.0 * g[i, m]
                if v < best:
                    best = v
                    best_k = m
            out_d[i] = best if best > 0.0 else 0.0
            out_k[i] = best_k

    @njit(cache=True, nogil=True)
    def _nb_all_sqdist(q64, p64, out):
        n, d = q64.shape
        k = p64.shape[0]
        g = np.dot(q64, p64.T)
        pp = np.empty(k, dtype=np.float64)
        for m in range(k):
            acc = 0.0
            for j in range(d):
                acc += p64[m, j] * p64[m, j]
            pp[m] = acc
        for i in range(n):
            qq = 0.0
            for j in range(d):
                qq += q64[i, j] * q64[i, j]
            for m in range(k):
                v = qq + pp[m] - 2.0 * g[i, m]
                out[i, m] = v if v > 0.0 else 0.0

    @njit(cache=True, nogil=True)
    def _nb_aniso_sqdist(q64, p64, lam, neg_logdet, out):
        # sum_j lam[m,j] (q_j - mu_j)^2 - sum_j log lam[m,j], expanded as
        # (q^2) lam^T - 2 q (lam*mu)^T + sum lam mu^2
        n = q64.shape[0]
        k, d = p64.shape
        g1 = np.dot(q64 * q64, np.ascontiguousarray(lam.T))
        g2 = np.dot(q64, np.ascontiguousarray((lam * p64).T))
        ppw = np.empty(k, dtype=np.float64)
        for m in range(k):
            acc = 0.0
            for j in range(d):
                acc += lam[m, j] * p64[m, j] * p64[m, j]
            ppw[m] = acc
        for i in range(n):
            for m in range(k):
                out[i, m] = g1[i, m] - 2.0 * g2[i, m] + ppw[m] + neg_logdet[m]


# ---------------------------------------------------------------------------
# public API (backend-dispatching)
# ---------------------------------------------------------------------------

def min_sqdist_update(x: np.ndarray, center: np.ndarray, min_d: np.ndarray) -> None:
    """In-place min_d[i] = min(min_d[i], ||x[i]-center||^2), float64 direct
    differences (keeps the coreset argmax bitwise-stable)."""
    if USE_NUMBA:
        _nb_min_sqdist_update(x, center, min_d)
    else:
        diff = x.astype(np.float64) - center.astype(np.float64)
        np.minimum(min_d, np.einsum("ij,ij->i", diff, diff), out=min_d)


def nearest_sqdist(q: np.ndarray, protos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row nearest-prototype squared distance and its index.

    q: (n, D), protos: (K, D). Returns (dist float64 (n,), argmin int64 (n,)).
    Ties resolve to the lowest prototype index in both backends.
    """
    n = q.shape[0]
    out_d = np.empty(n, dtype=np.float64)
    out_k = np.empty(n, dtype=np.int64)
    if USE_NUMBA:
        _nb_nearest_sqdist(_as64(q), _as64(protos), out_d, out_k)
    else:
        d = all_sqdist(q, protos)
        np.argmin(d, axis=1, out=out_k)
        out_d[:] = d[np.arange(n), out_k]
    return out_d, out_k


def all_sqdist(q: np.ndarray, protos: np.ndarray) -> np.ndarray:
    """Full (n, K) squared-distance matrix in float64, clamped at zero
    (the GEMM expansion can round slightly below it)."""
    if USE_NUMBA:
        out = np.empty((q.shape[0], protos.shape[0]), dtype=np.float64)
        _nb_all_sqdist(_as64(q), _as64(protos), out)
        return out
    q64 = q.astype(np.float64)
    p64 = protos.astype(np.float64)
    qq = np.einsum("ij,ij->i", q64, q64)[:, None]
    pp = np.einsum("ij,ij->i", p64, p64)[None, :]
    d = qq + pp - 2.0 * (q64 @ p64.T)
    np.maximum(d, 0.0, out=d)
    return d


def aniso_sqdist(q: np.ndarray, protos: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Precision-weighted quadratic form minus log-determinant, shape (n, K).

    lam: (K, D) diagonal precisions. Entry [i, m] is
    sum_d lam[m,d] (q[i,d]-protos[m,d])^2 - sum_d log lam[m,d].
    """
    lam64 = _as64(lam)
    neg_logdet = -np.log(lam64).sum(axis=1)
    if USE_NUMBA:
        out = np.empty((q.shape[0], protos.shape[0]), dtype=np.float64)
        _nb_aniso_sqdist(_as64(q), _as64(protos), lam64, neg_logdet, out)
        return out
    q64 = q.astype(np.float64)
    p64 = protos.astype(np.float64)
    qq = (q64 * q64) @ lam64.T
    cross = q64 @ (lam64 * p64).T
    pp = np.einsum("ij,ij->i", lam64 * p64, p64)[None, :]
    return qq - 2.0 * cross + pp + neg_logdet[None, :]


def warmup() -> None:
    """Trigger JIT compilation on tiny inputs so timings exclude compile cost."""
    x = np.zeros((2, 3), dtype=np.float32)
    p = np.ones((2, 3), dtype=np.float32)
    min_sqdist_update(x, p[0], np.full(2, np.inf))
    nearest_sqdist(x, p)
    all_sqdist(x, p)
    aniso_sqdist(x, p, np.ones_like(p))
