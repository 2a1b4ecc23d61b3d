import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from holdertest.kernel import SplitSample, convolve, kde, kde_pair, make_kernel


@pytest.mark.parametrize("alpha,d", [(0.5, 1), (1.0, 1), (2.0, 1), (3.0, 1), (4.0, 1), (1.0, 2), (3.0, 2)])
def test_kernel_moments(alpha, d):
    K = make_kernel(alpha, d)
    assert K.m == int(np.ceil(alpha)) - 1
    mom = K.moments()
    for e, v in mom.items():
        assert v == pytest.approx(1.0 if sum(e) == 0 else 0.0, abs=1e-8), e


def test_low_order_kernel_is_nonnegative_bump():
    K = make_kernel(1.0, 1)
    u = np.linspace(-0.6, 0.6, 2001)
    v = K(u)
    assert np.all(v >= 0)
    assert np.all(v[np.abs(u) >= 0.5] == 0.0)
    assert integrate.quad(lambda s: K(np.array([s]))[0], -0.5, 0.5)[0] == pytest.approx(1.0, abs=1e-8)


def test_high_order_kernel_takes_negative_values():
    K = make_kernel(3.0, 1)
    assert K(np.linspace(-0.5, 0.5, 1001)).min() < 0
    assert K.C_K > 0 and K.bound >= abs(K(np.zeros(1))[0])


def test_kernel_zero_outside_ball_2d():
    K = make_kernel(3.0, 2)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(20_000, 2))
    outside = np.linalg.norm(x, axis=1) >= 0.5
    assert np.all(K(x[outside]) == 0.0)


def test_invalid_kernel_args():
    with pytest.raises(ValueError):
        make_kernel(0.0, 1)


def test_convolution_of_constant():
    K = make_kernel(2.0, 1)
    x = np.linspace(0.3, 0.7, 5)
    np.testing.assert_allclose(convolve(K, lambda z: np.full(len(z), 3.0), x, 0.1), 3.0, rtol=1e-10)


def _exact_smoothing(K, f, x, h, kink):
    # independent oracle: adaptive quadrature split at the kink of f
    def integrand(u):
        return K.eval_1d(np.array([u]))[0] * f(x - h * u)
    pts = [(x - kink) / h] if abs((x - kink) / h) < 0.5 else None
    return integrate.quad(integrand, -0.5, 0.5, points=pts, epsabs=1e-13, epsrel=1e-13, limit=200)[0]


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
def test_bias_bound_on_extremal_functions(alpha):
    L, x0 = 1.0, 0.0
    f = lambda z: L * abs(z - x0) ** alpha
    K = make_kernel(alpha, 1)
    xs = np.linspace(-0.3, 0.3, 25)
    for h in (0.2, 0.1, 0.05):
        bias = max(abs(f(x) - _exact_smoothing(K, f, x, h, x0)) for x in xs)
        assert bias <= K.C_K * L * h ** alpha + 1e-6


def test_kde_single_observation():
    K = make_kernel(1.0, 2)
    s = SplitSample(np.array([[0.2, 0.3]]), np.array([[5.0, 5.0]]))
    p, q = kde_pair(s, np.array([[0.2, 0.3]]), 0.1, K)
    assert p[0] == pytest.approx(K(np.zeros((1, 2)))[0] / 0.1 ** 2)
    assert q[0] == 0.0


def test_kde_no_observation_nearby():
    K = make_kernel(1.0, 1)
    assert kde(np.array([0.0, 1.0]), np.array([0.5]), 0.2, K)[0] == 0.0


def test_kde_mean_matches_convolution():
    K = make_kernel(2.0, 1)
    rng = np.random.default_rng(5)
    x, h = np.array([0.3]), 0.4
    draws = np.array([kde(rng.normal(size=50), x, h, K)[0] for _ in range(10_000)])
    target = convolve(K, lambda z: stats.norm.pdf(z[:, 0]), x, h, 128)[0]
    assert abs(draws.mean() - target) <= 3 * draws.std() / np.sqrt(len(draws))


@given(seed=st.integers(0, 10 ** 6))
def test_kde_linear_in_empirical_measure(seed):
    K = make_kernel(1.0, 1)
    rng = np.random.default_rng(seed)
    data, x = rng.uniform(size=30), rng.uniform(size=7)
    np.testing.assert_allclose(kde(np.concatenate([data, data]), x, 0.2, K), kde(data, x, 0.2, K), rtol=1e-12)
    np.testing.assert_allclose(kde(rng.permutation(data), x, 0.2, K), kde(data, x, 0.2, K), rtol=1e-12)


def test_kde_variable_bandwidth_matches_pointwise():
    K = make_kernel(1.0, 2)
    rng = np.random.default_rng(1)
    data, x = rng.uniform(size=(200, 2)), rng.uniform(size=(6, 2))
    h = np.linspace(0.1, 0.4, 6)
    joint = kde(data, x, h, K)
    for i in range(6):
        assert joint[i] == pytest.approx(kde(data, x[i:i + 1], h[i], K)[0], rel=1e-12)


def test_split_sample():
    s = SplitSample.from_points(np.arange(6.0))
    assert s.k == 3 and s.first[:, 0].tolist() == [0, 1, 2]
    with pytest.raises(ValueError):
        SplitSample.from_points(np.arange(5.0))
    with pytest.raises(ValueError):
        kde_pair(s, np.zeros(1), 0.0, make_kernel(1.0, 1))
