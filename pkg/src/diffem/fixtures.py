"""Small analytic landscapes where EM-MW2 optimisation misbehaves.

* ``fixture_e3_landscape``: a three-atom measure on the line with a strict
  local (non-global) minimum of W2^2 to a fixed target.
* ``fixture_vanishing_gradient``: a dataset at which the gradient of
  X -> MW2^2(mu(F(theta*, X)), nu) is numerically zero when weights are learned.
* ``fixture_n2_landscape``: two-atom sources, where every interior local
  minimum is global while the boundary (a vanishing weight) traps descent.
"""
import itertools

import numpy as np

from diffem import emdiff, gmm, ot
from diffem.errors import ArgumentError


def w2_1d(x, a, y, b):
    """Exact W2^2 between weighted atoms on the line (monotone coupling)."""
    x, a, y, b = (np.asarray(v, dtype=np.float64) for v in (x, a, y, b))
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    x, a, y, b = x[ix], a[ix], y[iy], b[iy]
    i = j = 0
    ra, rb = a[0], b[0]
    total = 0.0
    while True:
        t = min(ra, rb)
        total += t * (x[i] - y[j]) ** 2
        ra -= t
        rb -= t
        if ra <= 0:
            i += 1
            if i == len(x):
                break
            ra = a[i]
        if rb <= 0:
            j += 1
            if j == len(y):
                break
            rb = b[j]
    return total


# ----------------------------------------------------------------------------
# three-atom local minimum


E3_FLAT = np.array([1.0, -1.0, 0.0, 0.0, 0.0])


def e3_measure(alpha, eta):
    w = np.array([1 / 6 + alpha[0], 1 / 6 + alpha[1], 2 / 3 - alpha[0] - alpha[1]])
    return np.array([eta[0], eta[1], 1.0 + eta[2]]), w


def e3_energy(alpha, eta, epsilon):
    x, a = e3_measure(alpha, eta)
    y = np.array([0.0, 1.0 - epsilon, 1.0 + epsilon])
    return w2_1d(x, a, y, np.full(3, 1 / 3))


def fixture_e3_landscape(epsilon=0.1, radius=0.01, steps=5):
    """Evaluate E3 at the origin and on a cubic grid of the given radius.

    Grid points on the flat line spanned by (1, -1, 0, 0, 0) (which leave the
    measure unchanged) are excluded. Returns a dict report.
    """
    if not 0 < epsilon < 0.5:
        raise ArgumentError("epsilon must lie in (0, 1/2)")
    e0 = e3_energy(np.zeros(2), np.zeros(3), epsilon)
    ticks = np.linspace(-radius, radius, steps)
    flat = E3_FLAT / np.linalg.norm(E3_FLAT)
    worst, n_points, n_lower = np.inf, 0, 0
    for z in itertools.product(ticks, repeat=5):
        z = np.array(z)
        if np.linalg.norm(z - (z @ flat) * flat) < 1e-14:
            continue
        e = e3_energy(z[:2], z[2:], epsilon)
        n_points += 1
        n_lower += e < e0
        worst = min(worst, e - e0)
    # a measure equal to the target, outside the restricted region
    glob = w2_1d([0.0, 1.0 - epsilon, 1.0 + epsilon], np.full(3, 1 / 3),
                 [0.0, 1.0 - epsilon, 1.0 + epsilon], np.full(3, 1 / 3))
    return {
        "epsilon": epsilon,
        "value_at_origin": e0,
        "expected_value": 2.0 * epsilon ** 2 / 3.0,
        "grid_points": n_points,
        "grid_points_lower": int(n_lower),
        "min_excess": float(worst),
        "global_value": glob,
    }


# ----------------------------------------------------------------------------
# vanishing gradient with learned weights

VANISH_W = 2.0 / 3.0
VANISH_M = 0.5


def vanishing_setup(epsilon):
    """(X_eps, theta*, nu, cfg) for the construction; d = 1, K = 2."""
    e2 = np.full((2, 1, 1), epsilon ** 2)
    m = VANISH_M
    x = np.array([-epsilon, epsilon, m - epsilon, m + epsilon, m - epsilon, m + epsilon])[:, None]
    theta = gmm.GmmParams(np.array([1 - VANISH_W, VANISH_W]), np.array([[0.0], [m]]), e2)
    nu = gmm.GmmParams(np.array([VANISH_W, 1 - VANISH_W]), np.array([[0.0], [1.0]]), e2)
    cfg = gmm.EmConfig(iterations=1, fix_weights=False, update_covariances=False)
    return x, theta, nu, cfg


def fixture_vanishing_gradient(epsilon=0.05):
    """Gradient of X -> MW2^2(mu(F(theta*, X)), nu) at X_eps, weights learned."""
    if not epsilon > 0:
        raise ArgumentError("epsilon must be positive")
    x, theta, nu, cfg = vanishing_setup(epsilon)
    theta1, xbar = _energy_grad(theta, x, nu, cfg)
    value = ot.mw2_squared(theta1, nu)[0]
    return {
        "epsilon": epsilon,
        "energy": value,
        "grad_norm": float(np.linalg.norm(xbar)),
        "param_drift": float(np.abs(theta1.flat() - theta.flat()).max()),
        "gradient": xbar.ravel().tolist(),
    }


def _energy_grad(theta, x, nu, cfg):
    theta1 = gmm.m_step(theta, x, cfg)
    g = ot.mw2_grad_params(theta1, nu, weights=True).flat()
    theta_T, xbar = emdiff.unrolled_vjp(theta, x, cfg, g)
    return theta_T, xbar


# ----------------------------------------------------------------------------
# two-atom landscape


def e2_energy(x1, x2, alpha, y1, y2, gamma):
    """W2^2(alpha d_x1 + (1 - alpha) d_x2, gamma d_y1 + (1 - gamma) d_y2)."""
    x = np.array([x1, x2], dtype=np.float64).reshape(2, -1)
    y = np.array([y1, y2], dtype=np.float64).reshape(2, -1)
    c = np.sum((x[:, None] - y[None]) ** 2, axis=2)
    a = np.array([alpha, 1.0 - alpha])
    b = np.array([gamma, 1.0 - gamma])
    return ot.solve_discrete_ot(c, a, b).cost


def _e2_grad(x, alpha, y, gamma):
    """Envelope gradient: plan fixed for positions, transport duals for alpha."""
    c = np.sum((x[:, None] - y[None]) ** 2, axis=2)
    sol = ot.solve_discrete_ot(c, np.array([alpha, 1.0 - alpha]), np.array([gamma, 1.0 - gamma]))
    gx = 2.0 * (sol.plan.sum(axis=1)[:, None] * x - sol.plan @ y)
    return sol.cost, gx, sol.u[0] - sol.u[1]


def _descend(x, alpha, y, gamma, lr, steps, tol):
    """Preconditioned descent with Armijo backtracking.

    Atom gradients are divided by the atom mass; alpha is projected onto
    [0, 1]. Each candidate step backtracks from ``lr``; the run stops when an
    accepted step moves less than ``tol``.
    """
    for _ in range(steps):
        value, gx, ga = _e2_grad(x, alpha, y, gamma)
        mass = np.array([alpha, 1.0 - alpha])
        dx = np.where(mass[:, None] > 0, gx / np.maximum(mass, 1e-300)[:, None], 0.0)
        # joint, atoms-only and alpha-only steps; the best one wins, which keeps
        # descent moving when alpha sits on a kink of the energy
        best = None
        for ddx, dga in ((dx, ga), (dx, 0.0), (0.0 * dx, ga)):
            slope = float(np.sum(ddx * gx) + dga * ga)
            if slope <= 0.0:
                continue
            t = lr
            while t > 1e-16:
                xn = x - t * ddx
                an = float(np.clip(alpha - t * dga, 0.0, 1.0))
                en = e2_energy(xn[0], xn[1], an, y[0], y[1], gamma)
                if en <= value - 1e-4 * t * slope:
                    if best is None or en < best[0]:
                        best = (en, xn, an, t)
                    break
                t *= 0.5
        if best is None:
            break
        _, xn, an, t = best
        moved = max(np.abs(xn - x).max(), abs(an - alpha))
        x, alpha = xn, an
        if moved < tol:
            break
    return x, alpha


def _distance_to_target(x, alpha, y, gamma):
    direct = max(np.abs(x - y).max(), abs(alpha - gamma))
    swapped = max(np.abs(x[::-1] - y).max(), abs((1 - alpha) - gamma))
    return min(direct, swapped)


def fixture_n2_landscape(gamma=0.3, y1=(0.0,), y2=(1.0,), grid=21, starts=100, seed=0,
                         lr=0.5, steps=5000, tol=1e-12):
    """Grid scan and multi-start descent of E2(x, alpha); see module docstring."""
    if not 0 < gamma < 1:
        raise ArgumentError("gamma must lie in (0, 1)")
    y = np.array([y1, y2], dtype=np.float64).reshape(2, -1)
    if np.allclose(y[0], y[1]):
        raise ArgumentError("target atoms must differ")
    d = y.shape[1]
    rng = np.random.default_rng(seed)
    lo, hi = y.min() - 1.0, y.max() + 1.0
    outcomes = []
    for _ in range(starts):
        x = rng.uniform(lo, hi, size=(2, d))
        alpha = float(rng.uniform(0.05, 0.95))
        xf, af = _descend(x, alpha, y, gamma, lr, steps, tol)
        outcomes.append({
            "distance": float(_distance_to_target(xf, af, y, gamma)),
            "alpha": af,
            "boundary": bool(af <= 0.0 or af >= 1.0),
            "energy": e2_energy(xf[0], xf[1], af, y[0], y[1], gamma),
        })
    report = {
        "gamma": gamma,
        "starts": starts,
        "global": sum(o["distance"] <= 1e-4 for o in outcomes),
        "boundary": sum(o["boundary"] for o in outcomes),
        "max_distance": max(o["distance"] for o in outcomes),
        "outcomes": outcomes,
    }
    if d == 1:
        report["grid_minima"] = _grid_minima(y, gamma, lo, hi, grid)
        report["boundary_check"] = boundary_directional_derivatives(gamma)
    return report


def _grid_minima(y, gamma, lo, hi, grid):
    """Interior grid points (x1 != x2, 0 < alpha < 1) not above any neighbour."""
    xs = np.linspace(lo, hi, grid)
    al = np.linspace(0.0, 1.0, grid)[1:-1]
    E = np.empty((grid, grid, al.size))
    for i, j, k in itertools.product(range(grid), range(grid), range(al.size)):
        E[i, j, k] = e2_energy(xs[i], xs[j], al[k], y[0], y[1], gamma)
    minima = []
    for i, j, k in itertools.product(range(1, grid - 1), range(1, grid - 1), range(1, al.size - 1)):
        if i == j:
            continue
        block = E[i - 1:i + 2, j - 1:j + 2, k - 1:k + 2]
        if E[i, j, k] <= block.min():
            minima.append([float(xs[i]), float(xs[j]), float(al[k]), float(E[i, j, k])])
    return minima


def boundary_directional_derivatives(gamma, n_dirs=200, t=1e-7, seed=0):
    """One-sided difference quotients of E2 at (-1, 1 - gamma, 0) along h with h3 > 0.

    Target atoms are 0 and 1 on the line. Returns the smallest quotient.
    """
    rng = np.random.default_rng(seed)
    z = np.array([-1.0, 1.0 - gamma, 0.0])
    e0 = e2_energy(z[0], z[1], z[2], 0.0, 1.0, gamma)
    worst = np.inf
    for _ in range(n_dirs):
        h = rng.standard_normal(3)
        h[2] = abs(h[2]) + 1e-3
        h /= np.linalg.norm(h)
        zp = z + t * h
        worst = min(worst, (e2_energy(zp[0], zp[1], zp[2], 0.0, 1.0, gamma) - e0) / t)
    return {"point": z.tolist(), "value": e0, "min_directional_derivative": float(worst),
            "alpha_derivative": 1.0 - (1.0 - gamma) ** 2}
