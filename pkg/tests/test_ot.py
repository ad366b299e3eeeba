import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffem import gmm, ot, studies
from diffem.errors import ArgumentError


def spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.2 * np.eye(d)


def test_bures_grad_closed_form_and_fd():
    rng = np.random.default_rng(0)
    S0, S1 = spd(rng, 3), spd(rng, 3)
    G = ot.bures_grad(S0, S1)
    # I - T with T the Gaussian transport map S0 -> S1
    w, v = np.linalg.eigh(S0)
    R = (v * np.sqrt(w)) @ v.T
    Ri = np.linalg.inv(R)
    w2, v2 = np.linalg.eigh(R @ S1 @ R)
    T = Ri @ ((v2 * np.sqrt(w2)) @ v2.T) @ Ri
    np.testing.assert_allclose(G, np.eye(3) - T, atol=1e-10)
    H = rng.standard_normal((3, 3))
    H = H + H.T
    h = 1e-6
    fd = (ot.bures_squared(S0 + h * H, S1) - ot.bures_squared(S0 - h * H, S1)) / (2 * h)
    assert np.sum(G * H) == pytest.approx(fd, rel=1e-6)


def test_gaussian_w2_commuting_case():
    # for commuting covariances the Bures term is ||S0^1/2 - S1^1/2||_F^2
    S0, S1 = np.diag([1.0, 4.0]), np.diag([9.0, 1.0])
    assert ot.gaussian_w2([0, 0], S0, [3, 4], S1) == pytest.approx(25 + 4 + 1, abs=1e-12)


def test_simplex_matches_brute_force_with_ties():
    rng = np.random.default_rng(1)
    for _ in range(30):
        m, n = rng.integers(1, 4, 2)
        c = np.round(2 * rng.random((m, n)))
        a, b = np.full(m, 1 / m), np.full(n, 1 / n)
        sol = ot.solve_discrete_ot(c, a, b)
        assert sol.cost == pytest.approx(ot.brute_force_ot(c, a, b)[1], abs=1e-12)
        np.testing.assert_allclose(sol.plan.sum(axis=1), a, atol=1e-14)
        np.testing.assert_allclose(sol.plan.sum(axis=0), b, atol=1e-14)
        # complementary slackness on the support
        support = sol.plan > 1e-14
        np.testing.assert_allclose((sol.u[:, None] + sol.v[None] - c)[support], 0.0, atol=1e-12)


def test_mw2_identity_and_symmetry():
    mu = studies.random_gmm(3, 2, 0)
    nu = studies.random_gmm(2, 2, 1)
    assert ot.mw2_squared(mu, mu)[0] == pytest.approx(0.0, abs=1e-10)
    assert ot.mw2_squared(mu, nu)[0] == pytest.approx(ot.mw2_squared(nu, mu)[0], rel=1e-12)


def test_mw2_mean_gradient_fd():
    mu = studies.random_gmm(2, 2, 4)
    nu = studies.random_gmm(3, 2, 5)
    g = ot.mw2_grad_params(mu, nu)
    h = 1e-6
    for k in range(2):
        for a in range(2):
            mp, mm = mu.means.copy(), mu.means.copy()
            mp[k, a] += h
            mm[k, a] -= h
            fp = ot.mw2_squared(gmm.GmmParams(mu.weights, mp, mu.covariances), nu)[0]
            fm = ot.mw2_squared(gmm.GmmParams(mu.weights, mm, mu.covariances), nu)[0]
            assert g.means[k, a] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-8)


def test_kl_generalised():
    assert ot.kl_generalised([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert ot.kl_generalised([0.0, 0.0], [0.3, 0.2]) == pytest.approx(0.5)
    assert ot.kl_generalised([0.7, 0.1], [0.5, 0.5]) > 0


def test_umw2_outlier_is_not_transported():
    mu = gmm.GmmParams(np.array([0.5, 0.5]), np.array([[0.0], [1.0]]), np.ones((2, 1, 1)))
    nu = gmm.GmmParams(np.array([0.5, 0.5]), np.array([[0.5], [1e3]]), np.ones((2, 1, 1)))
    value, plan = ot.umw2_squared(mu, nu, ot.UnbalancedConfig(10.0, 0.1))
    assert plan[:, 1].sum() <= 0.01 * 0.5
    assert value < ot.mw2_squared(mu, nu)[0]


def test_umw2_matches_grid_search():
    c = np.array([[0.0, 4.0], [1.0, 1.0]])
    a = b = np.array([0.5, 0.5])
    cfg = ot.UnbalancedConfig(1.0, 1.0)
    plan, value = ot.solve_unbalanced(c, a, b, cfg)
    g = np.linspace(0.0, 0.6, 61)
    P = np.stack(np.meshgrid(g, g, g, g, indexing="ij"), axis=-1).reshape(-1, 2, 2)
    r, s = P.sum(axis=2), P.sum(axis=1)

    def kl(p, q):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(p > 0, p * np.log(p / q), 0.0)
        return np.sum(t - p + q, axis=1)

    best = float(np.min(np.sum(P * c, axis=(1, 2)) + kl(r, a) + kl(s, b)))
    assert value <= best + 1e-9
    assert best - value <= 1e-3


def test_unbalanced_config_validation():
    with pytest.raises(ArgumentError):
        ot.UnbalancedConfig(0.0, 1.0)
    with pytest.raises(ArgumentError):
        ot.solve_unbalanced(np.zeros((1, 1)), [0.0], [1.0], ot.UnbalancedConfig())


def test_projection_takes_submatrix():
    mu = studies.random_gmm(2, 3, 0)
    P = ot.coordinate_projection(3, [0, 2])
    proj = ot.project_gmm(mu, P)
    np.testing.assert_allclose(proj.covariances, mu.covariances[:, [0, 2]][:, :, [0, 2]], atol=1e-15)
    np.testing.assert_allclose(proj.means, mu.means[:, [0, 2]])
    with pytest.raises(ArgumentError):
        ot.project_gmm(mu, np.array([[1.0, 1.0, 0.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_mw2_triangle_like_bounds(K0, K1, seed):
    mu = studies.random_gmm(K0, 2, seed)
    nu = studies.random_gmm(K1, 2, seed + 1)
    value, plan = ot.mw2_squared(mu, nu)
    c = ot.cost_matrix(mu, nu)
    assert c.min() - 1e-12 <= value <= c.max() + 1e-12
    np.testing.assert_allclose(plan.sum(axis=1), mu.weights, atol=1e-12)
