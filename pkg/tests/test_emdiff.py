import numpy as np
import pytest

from diffem import emdiff, gmm, selfcheck
from diffem.errors import ArgumentError


@pytest.fixture
def problem():
    rng = np.random.default_rng(3)
    theta, x, _ = selfcheck.random_instance(rng, n_max=8, d_max=2, K_max=2)
    return theta, x


@pytest.mark.parametrize("fix_weights", [False, True])
@pytest.mark.parametrize("update_covariances", [False, True])
def test_blocks_match_finite_differences(problem, fix_weights, update_covariances):
    theta, x = problem
    cfg = gmm.EmConfig(1, fix_weights=fix_weights, update_covariances=update_covariances)
    errs = selfcheck.check_instance(theta, x, cfg)
    assert max(errs.values()) <= 1e-5, errs


def test_vjp_matches_full_jacobians(problem):
    theta, x = problem
    cfg = gmm.EmConfig(1)
    g = np.random.default_rng(0).standard_normal(theta.n_params)
    tbar, xbar = emdiff.vjp(theta, x, cfg, g)
    np.testing.assert_allclose(tbar, g @ emdiff.dF_dtheta(theta, x, cfg), atol=1e-12)
    np.testing.assert_allclose(xbar.ravel(), g @ emdiff.dF_dx(theta, x, cfg), atol=1e-12)


def test_unrolled_vjp_matches_ad(problem):
    theta, x = problem
    cfg = gmm.EmConfig(6, cov_regulariser=1e-3)
    g = np.random.default_rng(1).standard_normal(theta.n_params)
    J = emdiff.jacobian_ad(theta, x, cfg, diagnostics=False).jacobian
    _, xbar = emdiff.unrolled_vjp(theta, x, cfg, g)
    np.testing.assert_allclose(xbar.ravel(), g @ J, atol=1e-10)


def test_ad_matches_fd_small():
    rng = np.random.default_rng(5)
    theta = gmm.GmmParams(np.array([0.4, 0.6]), np.array([[-2.0, 0.0], [2.0, 0.5]]),
                          np.repeat(np.eye(2)[None], 2, 0))
    x = gmm.sample_gmm(theta, 15, rng)
    cfg = gmm.EmConfig(4)
    ad = emdiff.jacobian_ad(theta, x, cfg).jacobian
    fd = emdiff.jacobian_fd(theta, x, cfg).jacobian
    assert emdiff.relative_mse(ad, fd) <= 1e-8


def test_ai_approaches_ad_at_convergence():
    mu = gmm.GmmParams(np.array([0.5, 0.5]), np.array([[-5.0, 0.0], [5.0, 0.0]]),
                       np.repeat(0.5 * np.eye(2)[None], 2, 0))
    x = gmm.sample_gmm(mu, 80, 0)
    theta0 = gmm.kmeanspp_init(x, 2, 0)
    cfg = gmm.EmConfig(60)
    traj = gmm.em_trajectory(theta0, x, cfg)
    ad = emdiff.jacobian_ad(theta0, x, cfg, diagnostics=False).jacobian
    ai = emdiff.jacobian_ai(traj[-1], x, cfg, diagnostics=False).jacobian
    assert emdiff.relative_mse(ai, ad) <= 1e-6


def test_weight_rows_sum_to_zero():
    rng = np.random.default_rng(2)
    theta, x, _ = selfcheck.random_instance(rng)
    J = emdiff.dF_dx(theta, x, gmm.EmConfig(1))
    np.testing.assert_allclose(J[:theta.n_components].sum(axis=0), 0.0, atol=1e-12)


def test_reports_and_errors(problem):
    theta, x = problem
    rep = emdiff.jacobian_os(theta, x, gmm.EmConfig(3))
    doc = rep.to_dict()
    assert doc["method"] == "OS" and doc["cols"] == x.size
    assert np.isfinite(rep.fixed_point_residual)
    with pytest.raises(ArgumentError):
        emdiff.jacobian_ad(theta, x, gmm.EmConfig(0))


def test_spectral_norm_matches_svd():
    A = np.random.default_rng(0).standard_normal((6, 4))
    assert emdiff.spectral_norm(A) == pytest.approx(np.linalg.svd(A, compute_uv=False)[0], rel=1e-8)
    assert emdiff.spectral_norm(np.zeros((3, 3))) == 0.0


def test_warm_start_step_consistent(problem):
    theta, x = problem
    cfg = gmm.EmConfig(1, fix_weights=True)
    g = np.random.default_rng(4).standard_normal(theta.n_params)
    theta1, x1 = emdiff.warm_start_step(theta, x, g, 0.1, cfg)
    _, xbar = emdiff.vjp(theta, x, cfg, g)
    np.testing.assert_allclose(x1, x - 0.1 * xbar, atol=1e-14)
    assert np.array_equal(theta1.flat(), gmm.m_step(theta, x, cfg).flat())
