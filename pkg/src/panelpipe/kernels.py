"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The two inner loops that dominate runtime are the alternating within-group
demeaning used for fixed-effects absorption and the edit-distance matrix
behind fuzzy name matching. Both carry an ``@njit`` implementation; set
``PANELPIPE_DISABLE_NUMBA=1`` to force the numpy/python path (the benchmark
in benchmarks/bench_kernels.py compares the two).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


_ENV_FLAG = "PANELPIPE_DISABLE_NUMBA"


def numba_enabled() -> bool:
    return HAS_NUMBA and os.environ.get(_ENV_FLAG, "") not in ("1", "true", "yes")


def active_backend() -> str:
    return "numba" if numba_enabled() else "numpy"


# ---------------------------------------------------------------------------
# Alternating within-group demeaning
# ---------------------------------------------------------------------------


def _demean_sweeps_numpy(values: np.ndarray, codes: np.ndarray, n_groups: np.ndarray,
                         tol: float, max_sweeps: int):
    n_factors = codes.shape[0]
    counts = [np.bincount(codes[f], minlength=int(n_groups[f])).astype(np.float64)
              for f in range(n_factors)]
    max_change = 0.0
    for sweep in range(1, max_sweeps + 1):
        max_change = 0.0
        for f in range(n_factors):
            sums = np.zeros((int(n_groups[f]), values.shape[1]))
            np.add.at(sums, codes[f], values)
            means = sums / counts[f][:, None]
            adjust = means[codes[f]]
            values -= adjust
            change = np.max(np.abs(adjust)) if adjust.size else 0.0
            if change > max_change:
                max_change = change
        if max_change < tol:
            return sweep, True, max_change
    return max_sweeps, False, max_change


@njit(cache=True)
def _demean_sweeps_numba(values, codes, n_groups, tol, max_sweeps):  # pragma: no cover - jit
    n_factors = codes.shape[0]
    n, k = values.shape
    max_change = 0.0
    for sweep in range(1, max_sweeps + 1):
        max_change = 0.0
        for f in range(n_factors):
            g = n_groups[f]
            sums = np.zeros((g, k))
            counts = np.zeros(g)
            for i in range(n):
                c = codes[f, i]
                counts[c] += 1.0
                for j in range(k):
                    sums[c, j] += values[i, j]
            for c in range(g):
                for j in range(k):
                    sums[c, j] /= counts[c]
            for i in range(n):
                c = codes[f, i]
                for j in range(k):
                    adj = sums[c, j]
                    values[i, j] -= adj
                    a = abs(adj)
                    if a > max_change:
                        max_change = a
        if max_change < tol:
            return sweep, True, max_change
    return max_sweeps, False, max_change


def demean(values: np.ndarray, factor_codes, tol: float = 1e-10,
           max_sweeps: int = 10_000):
    """Remove group means of every factor from each column of ``values``.

    ``factor_codes`` is a sequence of integer label arrays (0..G_f-1), one per
    fixed-effect factor. Returns (demeaned copy, sweeps, converged,
    last_change). With one factor a single sweep is exact; with several,
    sweeps alternate until the largest adjustment falls below ``tol``.
    """
    out = np.ascontiguousarray(values, dtype=np.float64).copy()
    if out.ndim == 1:
        out = out[:, None]
        squeeze = True
    else:
        squeeze = False
    codes = np.ascontiguousarray(np.vstack([np.asarray(c, dtype=np.int64) for c in factor_codes]))
    n_groups = np.array([int(c.max()) + 1 if len(c) else 0 for c in codes], dtype=np.int64)
    if out.shape[0] == 0 or codes.shape[0] == 0:
        return (out[:, 0] if squeeze else out), 0, True, 0.0
    for f in range(codes.shape[0]):
        if codes[f].min() < 0:
            raise ValueError("factor codes must be non-negative integers")
    if numba_enabled():
        sweeps, converged, last_change = _demean_sweeps_numba(out, codes, n_groups, tol, max_sweeps)
    else:
        sweeps, converged, last_change = _demean_sweeps_numpy(out, codes, n_groups, tol, max_sweeps)
    return (out[:, 0] if squeeze else out), sweeps, converged, last_change


# ---------------------------------------------------------------------------
# Edit distance for fuzzy name matching
# ---------------------------------------------------------------------------


def _levenshtein_python(a: np.ndarray, b: np.ndarray) -> int:
    la, lb = len(a), len(b)
    if la == 0:
        return lb
    if lb == 0:
        return la
    prev = list(range(lb + 1))
    cur = [0] * (lb + 1)
    for i in range(1, la + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, lb + 1):
            cost = 0 if ai == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev, cur = cur, prev
    return prev[lb]


@njit(cache=True)
def _levenshtein_numba(a, b):  # pragma: no cover - jit
    la, lb = len(a), len(b)
    if la == 0:
        return lb
    if lb == 0:
        return la
    prev = np.empty(lb + 1, dtype=np.int64)
    cur = np.empty(lb + 1, dtype=np.int64)
    for j in range(lb + 1):
        prev[j] = j
    for i in range(1, la + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, lb + 1):
            cost = 0 if ai == b[j - 1] else 1
            best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            if prev[j - 1] + cost < best:
                best = prev[j - 1] + cost
            cur[j] = best
        for j in range(lb + 1):
            prev[j] = cur[j]
    return prev[lb]


def _encode(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-32-le"), dtype=np.uint32).astype(np.int64)


def levenshtein(a: str, b: str) -> int:
    """Plain edit distance between two strings."""
    ea, eb = _encode(a), _encode(b)
    if numba_enabled():
        return int(_levenshtein_numba(ea, eb))
    return _levenshtein_python(ea, eb)


def similarity(a: str, b: str) -> float:
    """Normalized edit-distance similarity in [0, 1]; 1 means identical."""
    if not a and not b:
        return 1.0
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))
