"""Kernels, featurizer networks and the H-matrix shared by every MMD estimator."""

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from . import _accel
from .diffcore import (
    Tensor, as_tensor, concat_rows, exp, leaky_relu, pairwise_sqdist, parameter, submatrix,
)

LEAKY_SLOPE = 0.01


class MLP:
    """Fully connected network with leaky-ReLU between layers.

    ``widths`` includes the input size, e.g. ``[114, 256, 128, 64, 32, 16]``.
    No activation is applied after the last layer.
    """

    def __init__(self, widths: Sequence[int], rng=None, slope=LEAKY_SLOPE, weights=None, biases=None):
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2:
            raise ValueError("an MLP needs an input width and at least one layer width")
        self.slope = slope
        if weights is None:
            rng = np.random.default_rng(0) if rng is None else rng
            weights, biases = [], []
            gain = np.sqrt(2.0 / (1.0 + slope ** 2))
            for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
                bound = gain * np.sqrt(3.0 / fan_in)
                weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                biases.append(np.zeros((1, fan_out)))
        self.weights = [parameter(w) for w in weights]
        self.biases = [parameter(np.reshape(b, (1, -1))) for b in biases]

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def parameters(self) -> List[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def __call__(self, x):
        h = as_tensor(x)
        if h.shape[1] != self.in_dim:
            raise ValueError(f"network expects {self.in_dim} input features, got {h.shape[1]}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = leaky_relu(h, self.slope)
        return h

    def numpy_forward(self, x):
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.where(h > 0, h, self.slope * h)
        return h

    def copy(self):
        return MLP(self.widths, slope=self.slope,
                   weights=[w.data.copy() for w in self.weights],
                   biases=[b.data.copy() for b in self.biases])

    def load_arrays(self, arrays):
        for p, a in zip(self.parameters(), arrays):
            p.data = np.array(a, dtype=np.float64).reshape(p.data.shape)


# --------------------------------------------------------------------------
# kernel specifications


@dataclass
class LinearKernel:
    pass


@dataclass
class ConstantKernel:
    value: float = 1.0


@dataclass
class GaussianKernel:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"length-scale must be positive, got {self.sigma}")


@dataclass
class DeepKernel:
    """Gaussian kernel on featurizer outputs, with a trainable log length-scale."""

    featurizer: MLP
    log_sigma: Tensor = field(default_factory=lambda: parameter(0.0))

    @classmethod
    def create(cls, featurizer, sigma):
        if not sigma > 0:
            raise ValueError(f"length-scale must be positive, got {sigma}")
        return cls(featurizer, parameter(np.log(sigma)))

    @property
    def sigma(self):
        return float(np.exp(self.log_sigma.item()))

    def parameters(self):
        return self.featurizer.parameters() + [self.log_sigma]


@dataclass
class GridKernel:
    sigmas: Sequence[float]

    def __post_init__(self):
        self.sigmas = [float(s) for s in self.sigmas]
        if not self.sigmas:
            raise ValueError("kernel grid must be non-empty")
        if any(not s > 0 for s in self.sigmas):
            raise ValueError("all grid length-scales must be positive")


def _gaussian_from_sqdist(d, sigma):
    if isinstance(sigma, Tensor):
        # trainable length-scale: exp(-d / (2 sigma^2)) with gradient into sigma
        return exp(d * (-0.5 / (sigma * sigma)))
    if not sigma > 0:
        raise ValueError(f"length-scale must be positive, got {sigma}")
    return exp(d * (-0.5 / (sigma * sigma)))


def gram(x, y, k):
    """Differentiable Gram matrix K[i, j] = k(x_i, y_j)."""
    x, y = as_tensor(x), as_tensor(y)
    if isinstance(k, DeepKernel):
        fx, fy = k.featurizer(x), k.featurizer(y)
        return _gaussian_from_sqdist(pairwise_sqdist(fx, fy), k.log_sigma.exp())
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    if isinstance(k, GaussianKernel):
        return _gaussian_from_sqdist(pairwise_sqdist(x, y), k.sigma)
    if isinstance(k, LinearKernel):
        return x @ y.T
    if isinstance(k, ConstantKernel):
        return Tensor(np.full((x.shape[0], y.shape[0]), float(k.value)))
    if isinstance(k, GridKernel):
        raise TypeError("a grid names several kernels; use grid_h_matrices")
    raise TypeError(f"unsupported kernel {k!r}")


def gram_array(x, y, k):
    """Gram matrix as a plain array, using the compiled path where possible."""
    if isinstance(k, GaussianKernel):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.shape[1] != y.shape[1]:
            raise ValueError(f"feature dimensions differ: {x.shape[1]} vs {y.shape[1]}")
        return _accel.gaussian_gram_matrix(x, y, k.sigma)
    if isinstance(k, DeepKernel):
        fx = k.featurizer.numpy_forward(x)
        fy = k.featurizer.numpy_forward(y)
        return _accel.gaussian_gram_matrix(fx, fy, k.sigma)
    return gram(x, y, k).data


def _h_from_grams(kxx, kyy, kxy):
    return kxx + kyy - kxy - kxy.T


def h_matrix(Sp, Sq, k):
    """H[i, j] = k(X_i, X_j) + k(Y_i, Y_j) - k(X_i, Y_j) - k(Y_i, X_j), diagonal included."""
    Sp, Sq = as_tensor(Sp), as_tensor(Sq)
    n = Sp.shape[0]
    if Sq.shape[0] != n:
        raise ValueError(f"groups must have equal size; got {n} and {Sq.shape[0]}")
    if n < 2:
        raise ValueError("need at least two samples per group")
    if isinstance(k, DeepKernel):
        f = k.featurizer(concat_rows([Sp, Sq]))
        d = pairwise_sqdist(f, f)
        kk = _gaussian_from_sqdist(d, k.log_sigma.exp())
        return _split_h(kk, n)
    kk = gram(concat_rows([Sp, Sq]), concat_rows([Sp, Sq]), k)
    return _split_h(kk, n)


def _split_h(kk, n):
    # kk is the pooled (2n, 2n) Gram matrix of [Sp; Sq]
    kxx = submatrix(kk, 0, n, 0, n)
    kyy = submatrix(kk, n, 2 * n, n, 2 * n)
    kxy = submatrix(kk, 0, n, n, 2 * n)
    return _h_from_grams(kxx, kyy, kxy)


def h_from_sqdist(d, n, sigma):
    """H matrix of a Gaussian kernel from a pooled (2n, 2n) squared-distance tensor."""
    return _split_h(_gaussian_from_sqdist(d, sigma), n)


def grid_h_matrices(Sp, Sq, featurizer, sigmas):
    """One H matrix per grid length-scale, sharing a single featurizer pass."""
    sigmas = GridKernel(sigmas).sigmas
    Sp, Sq = as_tensor(Sp), as_tensor(Sq)
    n = Sp.shape[0]
    if Sq.shape[0] != n:
        raise ValueError(f"groups must have equal size; got {n} and {Sq.shape[0]}")
    if n < 2:
        raise ValueError("need at least two samples per group")
    f = featurizer(concat_rows([Sp, Sq])) if featurizer is not None else concat_rows([Sp, Sq])
    d = pairwise_sqdist(f, f)
    return [h_from_sqdist(d, n, s) for s in sigmas]


def median_heuristic(x):
    """sqrt(median pairwise squared distance / 2); 1.0 when all points coincide."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("median heuristic needs at least two points")
    d = _accel.pairwise_sqdist(x, x)
    iu = np.triu_indices(x.shape[0], k=1)
    med = float(np.median(d[iu]))
    if not med > 0:
        return 1.0
    return float(np.sqrt(med / 2.0))


def default_grid(sigma_med, size=6):
    """Log2-spaced length-scales from sigma_med/4 upward by factors of two."""
    return [float(sigma_med * 2.0 ** (k - 2)) for k in range(size)]
