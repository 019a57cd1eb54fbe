"""Quantized prefilter for exact top-k scans over large partitions.

Each stored vector ``v`` also keeps an int8 code ``c`` and a scale ``s`` with
``|v_j - s * c_j| <= s / 2``.  For a query ``q`` the coded score differs from the
true inner product by at most ``s * ||q||_1 / 2``, so every vector whose upper
bound falls below the k-th largest lower bound can be discarded without being
rescored.  The survivors are rescored in float64 with a fixed summation
order, so identical vectors always receive identical scores.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# float32 accumulation of at most a few thousand int8 products stays far
# inside this slack.
_BOUND_SLACK = 0.51
_ABS_SLACK = 1e-6


def quantize(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (int8 codes, float32 per-row scales) for a float32 matrix."""
    vectors = np.atleast_2d(vectors).astype(np.float64)
    peak = np.abs(vectors).max(axis=1)
    scales = np.where(peak > 0, peak / 127.0, 1.0).astype(np.float32)
    # work in float64 against the float32 scale actually stored
    s64 = scales.astype(np.float64)[:, None]
    codes = np.clip(np.rint(vectors / s64), -127, 127)
    resid = np.abs(vectors - s64 * codes)
    codes = codes.astype(np.int8)
    bad = resid.max(axis=1) > scales * 0.5 * (1 + 1e-9)
    if bad.any():  # pragma: no cover - rint guarantees this
        raise AssertionError("quantization residual exceeds bound")
    return codes, scales


@njit(fastmath=True, cache=True)
def _coded_scores(codes, scales, q, out):
    n, d = codes.shape
    for i in range(n):
        acc = np.float32(0.0)
        for j in range(d):
            acc += q[j] * np.float32(codes[i, j])
        out[i] = acc * scales[i]


@njit(cache=True)
def _sift_down(heap, pos):
    k = heap.shape[0]
    while True:
        child = 2 * pos + 1
        if child >= k:
            return
        if child + 1 < k and heap[child + 1] < heap[child]:
            child += 1
        if heap[pos] <= heap[child]:
            return
        heap[pos], heap[child] = heap[child], heap[pos]
        pos = child


@njit(cache=True)
def _select(approx, scales, err_scale, abs_slack, k):
    """Rows whose upper bound reaches the k-th largest lower bound."""
    n = approx.shape[0]
    # min-heap holding the k largest lower bounds seen so far
    heap = np.empty(k, dtype=np.float64)
    for i in range(k):
        heap[i] = np.float64(approx[i]) - (np.float64(scales[i]) * err_scale + abs_slack)
    for i in range(k // 2 - 1, -1, -1):
        _sift_down(heap, i)
    for i in range(k, n):
        low = np.float64(approx[i]) - (np.float64(scales[i]) * err_scale + abs_slack)
        if low > heap[0]:
            heap[0] = low
            _sift_down(heap, 0)
    kth = heap[0]
    out = np.empty(n, dtype=np.int64)
    m = 0
    for i in range(n):
        if np.float64(approx[i]) + (np.float64(scales[i]) * err_scale + abs_slack) >= kth:
            out[m] = i
            m += 1
    return out[:m]


@njit(cache=True)
def _rescore(vectors, rows, q, out):
    # fixed 8-lane accumulation order: equal rows always get equal scores,
    # whatever their position (BLAS gemv rounding depends on row alignment)
    d = vectors.shape[1]
    body = d - d % 8
    lanes = np.empty(8, dtype=np.float64)
    for n in range(rows.shape[0]):
        r = rows[n]
        lanes[:] = 0.0
        for j in range(0, body, 8):
            for t in range(8):
                lanes[t] += np.float64(vectors[r, j + t]) * q[j + t]
        acc = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
        for j in range(body, d):
            acc += np.float64(vectors[r, j]) * q[j]
        out[n] = acc


def rescore(vectors: np.ndarray, rows: np.ndarray, query: np.ndarray) -> np.ndarray:
    """float64 inner products of ``vectors[rows]`` with ``query``, row-position independent."""
    out = np.empty(len(rows), dtype=np.float64)
    _rescore(vectors, np.ascontiguousarray(rows, dtype=np.int64), np.ascontiguousarray(query, dtype=np.float64), out)
    return out


def candidate_rows(codes: np.ndarray, scales: np.ndarray, query: np.ndarray, k: int) -> np.ndarray:
    """Row positions that may belong to the exact top-k of ``codes`` for ``query``."""
    n = codes.shape[0]
    if k >= n:
        return np.arange(n)
    q32 = np.ascontiguousarray(query, dtype=np.float32)
    approx = np.empty(n, dtype=np.float32)
    _coded_scores(codes, scales, q32, approx)
    err_scale = float(np.abs(np.asarray(query, dtype=np.float64)).sum() * _BOUND_SLACK)
    return _select(approx, scales, err_scale, _ABS_SLACK, int(k))
