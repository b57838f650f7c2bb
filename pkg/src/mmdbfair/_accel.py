"""Hot numeric kernels: numba-compiled when available, plain numpy otherwise.

Set ``MMDBFAIR_PURE_NUMPY=1`` (or numba's own ``NUMBA_DISABLE_JIT=1``) to force
the numpy path. Both paths compute the same quantities; results agree to
floating-point summation order, not bit for bit.
"""

import os

import numpy as np

_FLAG = os.environ.get("MMDBFAIR_PURE_NUMPY", "").strip().lower()
PURE_NUMPY = _FLAG not in ("", "0", "false", "no")

try:
    if PURE_NUMPY:
        raise ImportError("numba disabled by MMDBFAIR_PURE_NUMPY")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy reference path


def _sqdist_np(x, y):
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    np.maximum(d, 0.0, out=d)
    return d


def _perm_stats_np(K, perms, n):
    # perms: (P, 2n) int array; first n entries of a row form the X group, the
    # rest the Y group, paired positionally. Returns n * MMD_u^2 per row.
    P = perms.shape[0]
    out = np.empty(P)
    chunk = max(1, 4_000_000 // (4 * n * n))
    for start in range(0, P, chunk):
        idx = perms[start:start + chunk]
        xi = idx[:, :n]
        yi = idx[:, n:]
        kxx = K[xi[:, :, None], xi[:, None, :]]
        kyy = K[yi[:, :, None], yi[:, None, :]]
        kxy = K[xi[:, :, None], yi[:, None, :]]
        h = kxx + kyy - kxy - kxy.transpose(0, 2, 1)
        tot = h.sum((1, 2)) - np.trace(h, axis1=1, axis2=2)
        out[start:start + chunk] = tot / (n - 1)
    return out


def _block_stats_np(K, perm, b, B):
    out = np.empty(b)
    for j in range(b):
        xi = perm[j * B:(j + 1) * B]
        yi = perm[b * B + j * B:b * B + (j + 1) * B]
        h = K[np.ix_(xi, xi)] + K[np.ix_(yi, yi)] - K[np.ix_(xi, yi)] - K[np.ix_(yi, xi)]
        out[j] = (h.sum() - np.trace(h)) / (B * (B - 1))
    return out


def _gaussian_gram_np(x, y, sigma):
    return np.exp(-_sqdist_np(x, y) / (2.0 * sigma * sigma))


# --------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(cache=False)
    def _sqdist_nb(x, y):
        n, d = x.shape
        m = y.shape[0]
        out = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    diff = x[i, k] - y[j, k]
                    acc += diff * diff
                out[i, j] = acc
        return out

    @njit(cache=False)
    def _gaussian_gram_nb(x, y, sigma):
        d = _sqdist_nb(x, y)
        scale = 1.0 / (2.0 * sigma * sigma)
        for i in range(d.shape[0]):
            for j in range(d.shape[1]):
                d[i, j] = np.exp(-d[i, j] * scale)
        return d

    @njit(cache=False)
    def _perm_stats_nb(K, perms, n):
        P = perms.shape[0]
        out = np.empty(P)
        for p in range(P):
            tot = 0.0
            for i in range(n):
                xi = perms[p, i]
                yi = perms[p, n + i]
                for j in range(n):
                    if i == j:
                        continue
                    xj = perms[p, j]
                    yj = perms[p, n + j]
                    tot += K[xi, xj] + K[yi, yj] - K[xi, yj] - K[yi, xj]
            out[p] = tot / (n - 1)
        return out

    @njit(cache=False)
    def _block_stats_nb(K, perm, b, B):
        out = np.empty(b)
        for blk in range(b):
            ox = blk * B
            oy = b * B + blk * B
            tot = 0.0
            for i in range(B):
                xi = perm[ox + i]
                yi = perm[oy + i]
                for j in range(B):
                    if i == j:
                        continue
                    xj = perm[ox + j]
                    yj = perm[oy + j]
                    tot += K[xi, xj] + K[yi, yj] - K[xi, yj] - K[yi, xj]
            out[blk] = tot / (B * (B - 1))
        return out

    # dense distances go through BLAS matmul, which beats the loop versions
    # (see benchmarks/bench_accel.py); the loops stay for comparison
    sqdist = _sqdist_np
    gaussian_gram = _gaussian_gram_np
    perm_stats = _perm_stats_nb
    block_stats = _block_stats_nb
else:
    sqdist = _sqdist_np
    gaussian_gram = _gaussian_gram_np
    perm_stats = _perm_stats_np
    block_stats = _block_stats_np


def permutation_statistics(K, perms, n):
    """Scaled U-statistics ``n * MMD_u^2`` of every relabeling in ``perms``.

    ``K`` is the (2n, 2n) Gram matrix of the pooled sample.
    """
    K = np.ascontiguousarray(K, dtype=np.float64)
    perms = np.ascontiguousarray(perms, dtype=np.int64)
    return perm_stats(K, perms, int(n))


def block_statistics(K, perm, b, B):
    """Per-block U-statistics; ``perm[:b*B]`` indexes X blocks, ``perm[b*B:]`` Y."""
    K = np.ascontiguousarray(K, dtype=np.float64)
    perm = np.ascontiguousarray(perm, dtype=np.int64)
    return block_stats(K, perm, int(b), int(B))


def pairwise_sqdist(x, y):
    return sqdist(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(y, dtype=np.float64))


def gaussian_gram_matrix(x, y, sigma):
    return gaussian_gram(
        np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(y, dtype=np.float64), float(sigma)
    )
