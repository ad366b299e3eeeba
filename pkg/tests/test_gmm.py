import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffem import gmm
from diffem.errors import ArgumentError, DegenerateCovariance


def mixture(rng, K=3, d=2):
    w = rng.uniform(0.5, 1.5, K)
    a = rng.standard_normal((K, d, d))
    return gmm.GmmParams(w / w.sum(), 3 * rng.standard_normal((K, d)),
                         a @ np.swapaxes(a, 1, 2) + 0.3 * np.eye(d))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_params_validation():
    S = np.eye(2)[None]
    with pytest.raises(ArgumentError):
        gmm.GmmParams(np.array([0.5]), np.zeros((1, 2)), S)
    with pytest.raises(ArgumentError):
        gmm.GmmParams(np.array([1.0]), np.zeros((1, 2)), np.array([[[1.0, 0.2], [0.0, 1.0]]]))
    with pytest.raises(DegenerateCovariance):
        gmm.GmmParams(np.array([1.0]), np.zeros((1, 2)), np.zeros((1, 2, 2)))
    unnorm = gmm.GmmParams(np.array([2.0]), np.zeros((1, 2)), S, normalised=False)
    assert unnorm.weights[0] == 2.0


def test_params_are_immutable(rng):
    theta = mixture(rng)
    with pytest.raises(ValueError):
        theta.means[0, 0] = 1.0


def test_flat_round_trip(rng):
    theta = mixture(rng, K=3, d=3)
    back = gmm.GmmParams.from_flat(theta.flat(), 3, 3)
    assert np.array_equal(back.flat(), theta.flat())
    assert theta.n_params == 3 + 9 + 27


def test_check_dataset():
    with pytest.raises(ArgumentError):
        gmm.check_dataset(np.zeros((2, 2)))
    with pytest.raises(ArgumentError):
        gmm.check_dataset(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))  # collinear
    with pytest.raises(ArgumentError):
        gmm.check_dataset(np.array([[np.nan, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    assert gmm.Dataset(np.array([[0, 0], [1, 0], [0, 1.0]])).n == 3


def test_responsibilities_sum_to_one(rng):
    theta = mixture(rng)
    x = gmm.sample_gmm(theta, 100, rng)
    g = gmm.e_step(theta, x)
    np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-14)
    assert np.all(g >= 0)


def test_e_step_far_points_do_not_underflow(rng):
    theta = mixture(rng)
    g = gmm.e_step(theta, np.array([[1e4, -1e4]]))
    assert np.all(np.isfinite(g)) and abs(g.sum() - 1) < 1e-14


def test_em_increases_likelihood(rng):
    theta_true = mixture(rng)
    x = gmm.sample_gmm(theta_true, 300, rng)
    theta0 = gmm.kmeanspp_init(x, 3, 1)
    _, diag = gmm.em_fit(theta0, x, gmm.EmConfig(25))
    assert len(diag.log_likelihoods) == 26
    assert np.all(np.diff(diag.log_likelihoods) >= -1e-9)


def test_fixed_weights_and_frozen_covariances(rng):
    theta = mixture(rng)
    x = gmm.sample_gmm(theta, 80, rng)
    out = gmm.m_step(theta, x, gmm.EmConfig(1, fix_weights=True, update_covariances=False))
    assert np.array_equal(out.weights, theta.weights)
    assert np.array_equal(out.covariances, theta.covariances)


def test_regulariser_floor(rng):
    x = np.repeat(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), 4, axis=0)
    theta = gmm.GmmParams(np.full(3, 1 / 3), x[[0, 4, 8]], np.repeat(1e-4 * np.eye(2)[None], 3, 0))
    with pytest.raises(DegenerateCovariance):
        gmm.m_step(theta, x, gmm.EmConfig(1))
    out = gmm.m_step(theta, x, gmm.EmConfig(1, cov_regulariser=1e-3))
    assert np.all(np.linalg.eigvalsh(out.covariances) >= 1e-3 - 1e-12)


def test_zero_iterations_returns_initial(rng):
    theta = mixture(rng)
    x = gmm.sample_gmm(theta, 20, rng)
    assert gmm.em_trajectory(theta, x, gmm.EmConfig(0)) == [theta]


def test_kmeanspp_deterministic(rng):
    x = gmm.sample_gmm(mixture(rng), 50, rng)
    a, b = gmm.kmeanspp_init(x, 3, 7), gmm.kmeanspp_init(x, 3, 7)
    assert np.array_equal(a.means, b.means)
    with pytest.raises(ArgumentError):
        gmm.kmeanspp_init(x, 0, 0)


def test_sample_gmm_moments():
    theta = gmm.GmmParams(np.ones(1), np.array([[1.0, -2.0]]), np.array([[[2.0, 0.5], [0.5, 1.0]]]))
    x = gmm.sample_gmm(theta, 40000, 0)
    np.testing.assert_allclose(x.mean(axis=0), [1.0, -2.0], atol=0.03)
    np.testing.assert_allclose(gmm.empirical_covariance(x), theta.covariances[0], atol=0.05)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_m_step_stays_valid(K, d, seed):
    rng = np.random.default_rng(seed)
    theta = mixture(rng, K, d)
    x = gmm.sample_gmm(theta, 10 * (d + 1) * K, rng)
    out = gmm.m_step(theta, x, gmm.EmConfig(1, cov_regulariser=1e-6))
    assert abs(out.weights.sum() - 1) < 1e-12
    assert np.all(np.linalg.eigvalsh(out.covariances) > 0)
