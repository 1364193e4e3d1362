"""Hot numeric kernels: pairwise distances, leaf mismatch counts, GBDT split search.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback;
``backend.USE_NUMBA`` picks one at import time (env ``MALSIM_BACKEND=numpy``
forces the fallback). Public functions always take/return float64 or int64
numpy arrays.
"""

import numpy as np

from .backend import USE_NUMBA

_CHUNK = 256  # query rows per block in the numpy fallbacks


# ---------------------------------------------------------------------------
# numpy fallbacks


def _sq_dist_matrix_np(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    out = np.empty((n, B.shape[0]), dtype=np.float64)
    for start in range(0, n, _CHUNK):
        block = A[start : start + _CHUNK]
        diff = block[:, None, :] - B[None, :, :]
        out[start : start + _CHUNK] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _mismatch_matrix_np(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    out = np.empty((n, B.shape[0]), dtype=np.int64)
    for start in range(0, n, _CHUNK):
        block = A[start : start + _CHUNK]
        out[start : start + _CHUNK] = (block[:, None, :] != B[None, :, :]).sum(axis=2)
    return out


def _best_split_np(X, g, h, lam, gamma, min_child_weight):
    n, d = X.shape
    G = float(g.sum())
    H = float(h.sum())
    parent = G * G / (H + lam)
    best_gain = 0.0
    best_feat = -1
    best_thr = 0.0
    for f in range(d):
        vals = X[:, f]
        order = np.argsort(vals, kind="mergesort")
        sv = vals[order]
        gl = np.cumsum(g[order])[:-1]
        hl = np.cumsum(h[order])[:-1]
        gr = G - gl
        hr = H - hl
        valid = (sv[:-1] != sv[1:]) & (hl >= min_child_weight) & (hr >= min_child_weight)
        if not valid.any():
            continue
        gains = np.where(
            valid,
            0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent) - gamma,
            -np.inf,
        )
        k = int(np.argmax(gains))  # first max: lowest threshold wins ties
        if gains[k] > best_gain:
            best_gain = float(gains[k])
            best_feat = f
            best_thr = 0.5 * (sv[k] + sv[k + 1])
    return best_feat, best_thr, best_gain


# ---------------------------------------------------------------------------
# numba kernels

if USE_NUMBA:
    from numba import njit, prange

    @njit(cache=True, parallel=True)
    def _sq_dist_matrix_nb(A, B):
        n, d = A.shape
        m = B.shape[0]
        out = np.empty((n, m), dtype=np.float64)
        for i in prange(n):
            for j in range(m):
                s = 0.0
                for k in range(d):
                    diff = A[i, k] - B[j, k]
                    s += diff * diff
                out[i, j] = s
        return out

    @njit(cache=True, parallel=True)
    def _mismatch_matrix_nb(A, B):
        n, t = A.shape
        m = B.shape[0]
        out = np.empty((n, m), dtype=np.int64)
        for i in prange(n):
            for j in range(m):
                c = 0
                for k in range(t):
                    if A[i, k] != B[j, k]:
                        c += 1
                out[i, j] = c
        return out

    @njit(cache=True)
    def _best_split_nb(X, g, h, lam, gamma, min_child_weight):
        n, d = X.shape
        G = 0.0
        H = 0.0
        for i in range(n):
            G += g[i]
            H += h[i]
        parent = G * G / (H + lam)
        best_gain = 0.0
        best_feat = -1
        best_thr = 0.0
        for f in range(d):
            vals = np.empty(n, dtype=np.float64)
            for i in range(n):
                vals[i] = X[i, f]
            order = np.argsort(vals, kind="mergesort")
            gl = 0.0
            hl = 0.0
            for k in range(n - 1):
                idx = order[k]
                gl += g[idx]
                hl += h[idx]
                v = vals[idx]
                v_next = vals[order[k + 1]]
                if v == v_next:
                    continue
                gr = G - gl
                hr = H - hl
                if hl < min_child_weight or hr < min_child_weight:
                    continue
                gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent) - gamma
                if gain > best_gain:
                    best_gain = gain
                    best_feat = f
                    best_thr = 0.5 * (v + v_next)
        return best_feat, best_thr, best_gain


# ---------------------------------------------------------------------------
# public API


def sq_dist_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between every row of A and every row of B."""
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if USE_NUMBA:
        return _sq_dist_matrix_nb(A, B)
    return _sq_dist_matrix_np(A, B)


def mismatch_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Count of positions where rows of A and B disagree (Hamming counts)."""
    A = np.ascontiguousarray(A, dtype=np.int64)
    B = np.ascontiguousarray(B, dtype=np.int64)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if USE_NUMBA:
        return _mismatch_matrix_nb(A, B)
    return _mismatch_matrix_np(A, B)


def best_split(X, g, h, lam, gamma, min_child_weight):
    """Exact greedy split search over all features of a node's sample block.

    Thresholds are midpoints of adjacent distinct sorted values. Ties in gain
    are broken toward the lowest feature index, then the lowest threshold.
    Returns (feature, threshold, gain); feature is -1 if no split has
    positive gain.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    if USE_NUMBA:
        return _best_split_nb(X, g, h, lam, gamma, min_child_weight)
    return _best_split_np(X, g, h, lam, gamma, min_child_weight)
