import numpy as np
import pytest

from diffem import fixtures
from diffem.errors import ArgumentError


def test_w2_1d_brute_force():
    x, a = [0.0, 2.0], [0.3, 0.7]
    y, b = [1.0, 3.0], [0.5, 0.5]
    # monotone coupling: 0.3 (0->1), 0.2 (2->1), 0.5 (2->3)
    assert fixtures.w2_1d(x, a, y, b) == pytest.approx(0.3 + 0.2 + 0.5)


def test_e3_value_and_flat_direction():
    eps = 0.2
    assert fixtures.e3_energy(np.zeros(2), np.zeros(3), eps) == pytest.approx(2 * eps ** 2 / 3, abs=1e-15)
    # the flat direction swaps mass between two coincident atoms
    flat = fixtures.e3_energy(np.array([0.01, -0.01]), np.zeros(3), eps)
    assert flat == pytest.approx(2 * eps ** 2 / 3, abs=1e-15)


def test_e3_landscape_small_grid():
    r = fixtures.fixture_e3_landscape(epsilon=0.2, radius=0.01, steps=3)
    assert r["grid_points_lower"] == 0
    assert r["global_value"] == 0.0 < r["value_at_origin"]
    with pytest.raises(ArgumentError):
        fixtures.fixture_e3_landscape(epsilon=0.6)


def test_vanishing_gradient():
    r = fixtures.fixture_vanishing_gradient(0.05)
    assert r["grad_norm"] <= 1e-10
    assert r["param_drift"] <= 1e-12
    assert fixtures.fixture_vanishing_gradient(0.3)["grad_norm"] > 1e-3


def test_n2_descent_reaches_target():
    r = fixtures.fixture_n2_landscape(gamma=0.3, starts=8, grid=9)
    assert r["global"] == 8
    assert r["boundary"] == 0
    assert r["boundary_check"]["min_directional_derivative"] > 0


def test_n2_grid_minima_are_global():
    r = fixtures.fixture_n2_landscape(gamma=0.4, starts=1, grid=11)
    for x1, x2, alpha, energy in r["grid_minima"]:
        # grid resolution 0.3 in x and 0.1 in alpha: interior minima sit near the target
        assert energy <= 0.1


def test_n2_rejects_bad_input():
    with pytest.raises(ArgumentError):
        fixtures.fixture_n2_landscape(gamma=1.5)
    with pytest.raises(ArgumentError):
        fixtures.fixture_n2_landscape(y1=(1.0,), y2=(1.0,))
