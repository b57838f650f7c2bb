import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmdbfair import diffcore as dc
from mmdbfair.kernels import (
    MLP, ConstantKernel, DeepKernel, GaussianKernel, GridKernel, LinearKernel, default_grid, gram, gram_array,
    grid_h_matrices, h_matrix, median_heuristic,
)


def gauss(a, b, sigma):
    return np.exp(-np.sum((a - b) ** 2) / (2 * sigma ** 2))


def brute_h(x, y, k):
    n = len(x)
    return np.array([[k(x[i], x[j]) + k(y[i], y[j]) - k(x[i], y[j]) - k(y[i], x[j]) for j in range(n)]
                     for i in range(n)])


@pytest.fixture
def xy():
    rng = np.random.default_rng(3)
    return rng.normal(size=(6, 2)), rng.normal(1.0, 1.0, size=(6, 2))


def test_h_matrix_gaussian_matches_loops(xy):
    x, y = xy
    H = h_matrix(x, y, GaussianKernel(0.8)).data
    np.testing.assert_allclose(H, brute_h(x, y, lambda a, b: gauss(a, b, 0.8)), atol=1e-14)


def test_h_matrix_linear_matches_loops(xy):
    x, y = xy
    H = h_matrix(x, y, LinearKernel()).data
    np.testing.assert_allclose(H, brute_h(x, y, np.dot), atol=1e-12)


def test_h_matrix_is_symmetric(xy):
    H = h_matrix(*xy, GaussianKernel(1.3)).data
    np.testing.assert_allclose(H, H.T, atol=1e-15)


def test_h_matrix_constant_kernel_is_zero(xy):
    assert np.all(h_matrix(*xy, ConstantKernel(2.5)).data == 0.0)


def test_h_matrix_unequal_sizes():
    with pytest.raises(ValueError):
        h_matrix(np.zeros((3, 1)), np.zeros((4, 1)), GaussianKernel(1.0))


def test_gaussian_requires_positive_sigma():
    with pytest.raises(ValueError):
        GaussianKernel(0.0)
    with pytest.raises(ValueError):
        GridKernel([1.0, -1.0])
    with pytest.raises(ValueError):
        GridKernel([])


def test_gram_dimension_mismatch():
    with pytest.raises(ValueError):
        gram(np.zeros((2, 2)), np.zeros((2, 3)), GaussianKernel(1.0))


def test_gram_array_matches_differentiable_gram(xy):
    x, y = xy
    np.testing.assert_allclose(gram_array(x, y, GaussianKernel(0.7)), gram(x, y, GaussianKernel(0.7)).data,
                               atol=1e-14)


def test_mlp_forward_matches_manual():
    rng = np.random.default_rng(0)
    net = MLP([3, 4, 2], rng=rng)
    x = rng.normal(size=(5, 3))
    w1, b1, w2, b2 = [p.data for p in net.parameters()]
    h = x @ w1 + b1
    h = np.where(h > 0, h, 0.01 * h)
    ref = h @ w2 + b2
    np.testing.assert_allclose(net(x).data, ref, atol=1e-14)
    np.testing.assert_allclose(net.numpy_forward(x), ref, atol=1e-14)


def test_mlp_he_uniform_bounds():
    net = MLP([50, 40], rng=np.random.default_rng(1))
    bound = np.sqrt(2 / (1 + 0.01 ** 2)) * np.sqrt(3 / 50)
    w = net.weights[0].data
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.9 * bound
    assert np.all(net.biases[0].data == 0)


def test_mlp_input_check():
    with pytest.raises(ValueError):
        MLP([3, 2])(np.zeros((1, 4)))


def test_deep_kernel_gradients():
    rng = np.random.default_rng(5)
    net = MLP([2, 3, 2], rng=rng)
    k = DeepKernel.create(net, 0.9)
    x, y = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    assert dc.grad_check(lambda: h_matrix(x, y, k).square().sum(), k.parameters()) < 1e-6


def test_deep_kernel_equals_gaussian_on_features(xy):
    x, y = xy
    net = MLP([2, 3], rng=np.random.default_rng(2))
    k = DeepKernel.create(net, 1.7)
    H = h_matrix(x, y, k).data
    fx, fy = net.numpy_forward(x), net.numpy_forward(y)
    np.testing.assert_allclose(H, h_matrix(fx, fy, GaussianKernel(1.7)).data, atol=1e-13)
    assert k.sigma == pytest.approx(1.7)


def test_grid_h_matrices_one_per_sigma(xy):
    x, y = xy
    sig = [0.5, 1.0, 2.0]
    hs = grid_h_matrices(x, y, None, sig)
    for s, H in zip(sig, hs):
        np.testing.assert_allclose(H.data, h_matrix(x, y, GaussianKernel(s)).data, atol=1e-14)


def test_median_heuristic_brute_force():
    x = np.array([[0.0], [1.0], [3.0], [7.0]])
    d = [1, 9, 49, 4, 36, 16]
    assert median_heuristic(x) == pytest.approx(np.sqrt(np.median(d) / 2))
    assert median_heuristic(np.zeros((5, 2))) == 1.0


def test_default_grid():
    assert default_grid(2.0) == [0.5, 1.0, 2.0, 4.0, 8.0, 16.0]
    assert len(default_grid(1.0, 3)) == 3


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 2), elements=st.floats(-3, 3)), arrays(np.float64, (4, 2), elements=st.floats(-3, 3)),
       st.floats(0.2, 5.0))
def test_h_matrix_swap_symmetry(x, y, sigma):
    # swapping the roles of the two samples leaves H unchanged
    k = GaussianKernel(sigma)
    np.testing.assert_allclose(h_matrix(x, y, k).data, h_matrix(y, x, k).data, atol=1e-13)
