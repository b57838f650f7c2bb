"""MMD statistics, variance estimates, permutation thresholds and power estimates."""

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import _accel
from .diffcore import (
    Tensor, as_tensor, concat_rows, matmul, normal_cdf, normal_quantile, norm_cdf_value, reshape, sqrt,
    submatrix, take,
)
from .kernels import gram, gram_array, h_matrix


@dataclass(frozen=True)
class PowerConfig:
    """Significance level, hypothetical test size and block layout.

    ``b`` and ``B`` default to floor(sqrt(m)); ``lam=None`` means n**(2/3) for
    the batch size n the estimate is computed on.
    """

    alpha: float = 0.05
    m: int = 1024
    b: Optional[int] = None
    B: Optional[int] = None
    lam: Optional[float] = None
    n_permutations: int = 200

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.m < 1:
            raise ValueError("m must be at least 1")
        root = math.isqrt(self.m)
        if self.b is None:
            object.__setattr__(self, "b", max(root, 1))
        if self.B is None:
            object.__setattr__(self, "B", max(root, 1))
        if self.b < 1 or self.B < 1:
            raise ValueError("block count and block size must be positive")
        if self.b * self.B > self.m:
            raise ValueError(f"b*B = {self.b * self.B} exceeds m = {self.m}")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be non-negative")

    @property
    def t_alpha(self):
        return normal_quantile(1.0 - self.alpha)

    def lam_for(self, n):
        return float(n) ** (2.0 / 3.0) if self.lam is None else float(self.lam)

    def with_m(self, m):
        return replace(self, m=int(m), b=None, B=None)


@dataclass
class TestResult:
    statistic: float
    threshold: float
    reject: bool
    estimated_power: float

    __test__ = False


def _check_h(H):
    H = as_tensor(H)
    n = H.shape[0]
    if H.shape != (n, n):
        raise ValueError(f"H must be square, got {H.shape}")
    if n < 2:
        raise ValueError("the U-statistic needs n >= 2")
    return H, n


def mmd_u_sq(H):
    """Unbiased MMD^2: mean of the off-diagonal entries of H."""
    H, n = _check_h(H)
    off = Tensor(1.0 - np.eye(n))
    return (H * off).sum() * (1.0 / (n * (n - 1)))


def variance_hat(H, m, lam):
    """Regularized estimate of the variance of MMD_u^2 at sample size ``m``.

    Row sums include the diagonal H_ii = k(X_i,X_i) + k(Y_i,Y_i) - 2 k(X_i,Y_i).
    """
    H, n = _check_h(H)
    if m < 1:
        raise ValueError("m must be at least 1")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    rows = H.sum(axis=1)
    total = H.sum()
    first = (rows * rows).sum() * (4.0 / (m * n ** 3))
    second = (total * total) * (4.0 / (m * n ** 4))
    return first - second + lam / m


def block_power_hat(H, cfg):
    """Asymptotic power of a hypothetical b-block test, estimated from one batch.

    Phi(sqrt(b) * MMD_u^2 / sqrt(V_hat_B) - t_alpha), with the block-size
    variance obtained by rescaling the batch estimate.
    """
    H, n = _check_h(H)
    lam = cfg.lam_for(n)
    mmd = mmd_u_sq(H)
    var = variance_hat(H, cfg.B, lam)
    if var.item() <= 0.0:
        raise FloatingPointError("variance estimate is not positive; use lam > 0")
    ratio = mmd / sqrt(var)
    return normal_cdf(ratio * math.sqrt(cfg.b) - cfg.t_alpha)


def block_mmd(Sp, Sq, k, b, B, seed=0):
    """Mean of per-block U-statistics over a seeded random partition."""
    x, y = _as_array(Sp), _as_array(Sq)
    if x.shape[0] != y.shape[0]:
        raise ValueError("groups must have equal size")
    if x.shape[0] < b * B:
        raise ValueError(f"need at least b*B = {b * B} samples per group, got {x.shape[0]}")
    if B < 2:
        raise ValueError("block size must be at least 2")
    return float(block_statistics(x, y, k, b, B, seed).mean())


def block_partition(n, b, B, seed):
    """Indices of b blocks of size B: seeded shuffle, contiguous slices, leftovers dropped."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    return [order[j * B:(j + 1) * B] for j in range(b)]


def block_statistics(x, y, k, b, B, seed=0):
    n = x.shape[0]
    blocks = block_partition(n, b, B, seed)
    used = np.concatenate(blocks)
    z = np.vstack([x[used], y[used]])
    K = gram_array(z, z, k)
    nb = b * B
    perm = np.concatenate([np.arange(nb), nb + np.arange(nb)])
    return _accel.block_statistics(K, perm, b, B)


def block_test(Sp, Sq, k, b, B, alpha=0.05, seed=0):
    """B-test: sqrt(b) * mean block statistic against sqrt(sample variance) * t_alpha."""
    stats = block_statistics(_as_array(Sp), _as_array(Sq), k, b, B, seed)
    stat = math.sqrt(b) * stats.mean()
    thr = math.sqrt(stats.var(ddof=1)) * normal_quantile(1.0 - alpha)
    return TestResult(float(stat), float(thr), bool(stat > thr), float("nan"))


def _as_array(s):
    if isinstance(s, Tensor):
        return s.data
    a = np.asarray(s, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def quantile_index(count, alpha):
    """0-based order statistic used as the (1 - alpha) empirical quantile."""
    k = math.ceil((1.0 - alpha) * count - 1e-12)
    return min(max(k, 1), count) - 1


def random_relabelings(n, count, rng):
    return np.stack([rng.permutation(2 * n) for _ in range(count)]) if count else np.empty((0, 2 * n), np.int64)


def permutation_statistics(Sp, Sq, k, n_permutations, seed):
    x, y = _as_array(Sp), _as_array(Sq)
    if x.shape[0] != y.shape[0]:
        raise ValueError("groups must have equal size")
    n = x.shape[0]
    z = np.vstack([x, y])
    K = gram_array(z, z, k)
    rng = np.random.default_rng(seed)
    perms = random_relabelings(n, n_permutations, rng)
    ident = np.arange(2 * n)[None, :]
    stats = _accel.permutation_statistics(K, np.vstack([ident, perms]), n)
    return stats[0], stats[1:]


def permutation_threshold(Sp, Sq, k, alpha, n_permutations=200, seed=0):
    """(1 - alpha) empirical quantile of n * MMD_u^2 over random relabelings."""
    if n_permutations < 20:
        raise ValueError("use at least 20 permutations")
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    _, null = permutation_statistics(Sp, Sq, k, n_permutations, seed)
    return float(np.sort(null)[quantile_index(null.size, alpha)])


def asymptotic_u_power(mmd_sq, c_alpha, m, V_m):
    if not V_m > 0:
        raise ValueError("V_m must be positive")
    return norm_cdf_value((mmd_sq - c_alpha / m) / math.sqrt(V_m))


def two_sample_test(Sp, Sq, k, cfg=None, seed=0):
    """Permutation test on n * MMD_u^2, with the block-power estimate attached."""
    x, y = _as_array(Sp), _as_array(Sq)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"groups must have equal size; got {x.shape[0]} and {y.shape[0]}")
    n = x.shape[0]
    cfg = PowerConfig(m=n) if cfg is None else cfg
    if cfg.n_permutations < 20:
        raise ValueError("use at least 20 permutations")
    stat, null = permutation_statistics(x, y, k, cfg.n_permutations, seed)
    thr = float(np.sort(null)[quantile_index(null.size, cfg.alpha)])
    H = Tensor(h_matrix(x, y, k).data)
    power = block_power_hat(H, cfg).item()
    return TestResult(float(stat), thr, bool(stat > thr), power)


def permutation_power_hat(Sp, Sq, k, cfg, perms, split=False):
    """Differentiable permutation-threshold power estimate, Phi((MMD^2 - c/m) / sqrt(V_m)).

    ``perms`` are relabelings of the pooled sample (rows of a permutation of
    range(2n)). With ``split=True`` the threshold uses the first half of each
    group and the statistic the second half.
    """
    Sp, Sq = as_tensor(Sp), as_tensor(Sq)
    n = Sp.shape[0]
    if split:
        h = n // 2
        thr_p, thr_q = submatrix(Sp, 0, h, 0, Sp.shape[1]), submatrix(Sq, 0, h, 0, Sq.shape[1])
        Sp, Sq = submatrix(Sp, h, n, 0, Sp.shape[1]), submatrix(Sq, h, n, 0, Sq.shape[1])
        c_alpha = permutation_quantile(thr_p, thr_q, k, cfg.alpha, perms)
    else:
        c_alpha = permutation_quantile(Sp, Sq, k, cfg.alpha, perms)
    H = h_matrix(Sp, Sq, k)
    nn = H.shape[0]
    mmd = mmd_u_sq(H)
    var = variance_hat(H, cfg.m, cfg.lam_for(nn))
    return normal_cdf((mmd - c_alpha * (1.0 / cfg.m)) / sqrt(var))


def permutation_quantile(Sp, Sq, k, alpha, perms):
    """Differentiable empirical quantile of n * MMD_u^2 over the given relabelings."""
    Sp, Sq = as_tensor(Sp), as_tensor(Sq)
    n = Sp.shape[0]
    perms = np.asarray(perms, dtype=np.int64)
    if perms.shape[1] != 2 * n:
        # relabelings drawn for a larger sample; keep only the first 2n indices in order
        perms = np.stack([p[p < 2 * n] for p in perms])
    z = concat_rows([Sp, Sq])
    K = gram(z, z, k)
    coef = _relabel_coefficients(perms, n)
    stats = matmul(reshape(K, (1, 4 * n * n)), Tensor(coef.T))
    order = np.argsort(stats.data[0], kind="stable")
    j = order[quantile_index(stats.shape[1], alpha)]
    return take(stats, 0, int(j))


def _relabel_coefficients(perms, n):
    # n * MMD_u^2 of a relabeling equals <K, C> / (n - 1) with
    # C = w w^T - I + P + P^T (w = +/-1 group signs, P pairs X_i with Y_i).
    P = perms.shape[0]
    out = np.empty((P, 4 * n * n))
    for r, perm in enumerate(perms):
        w = np.empty(2 * n)
        w[perm[:n]] = 1.0
        w[perm[n:]] = -1.0
        C = np.outer(w, w) - np.eye(2 * n)
        C[perm[:n], perm[n:]] += 1.0
        C[perm[n:], perm[:n]] += 1.0
        out[r] = C.ravel() / (n - 1)
    return out
