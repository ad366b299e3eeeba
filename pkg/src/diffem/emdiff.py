"""Differentials of the EM map F(theta, X) and Jacobian strategies.

Parameters are flattened as ``[w (K) | m (K*d) | S (K*d*d)]`` and points as
``X.ravel()`` (row-major, length n*d). Covariance coordinates are the full
d x d entries; only symmetric perturbations of them are meaningful.

Frozen quantities (weights under ``fix_weights``, covariances when
``update_covariances`` is off) are treated as constants: their rows and
columns of dF/dtheta and their rows of dF/dX are zero.

Shorthands used below, all evaluated at the current theta:
    gamma[i, k]   responsibilities
    s[i, l]       S_l^{-1} (x_i - m_l)
    Q[i, l]       (-S_l^{-1} + s s^T) / 2, the derivative of log g_l(x_i) in S_l
    mass[k]       sum_i gamma[i, k]
    D[i, k]       x_i - F_m(theta)_k
    cD[k]         sum_i gamma[i, k] D[i, k] (zero up to rounding; kept for exactness)
"""
import json
from dataclasses import dataclass

import numpy as np

from diffem import gmm, linalg
from diffem.errors import ArgumentError, SingularSystem

METHODS = ("AD", "AI", "OS", "FD", "WARM")
POWER_ITERATIONS = 100
POWER_TOL = 1e-10
SINGULAR_COND = 1e14


def flatten(theta):
    return theta.flat()


def unflatten(v, K, d):
    return gmm.GmmParams.from_flat(v, K, d)


def n_params(K, d):
    return K + K * d + K * d * d


class _State:
    """Quantities shared by every differential at one (theta, X)."""

    def __init__(self, theta, x, cfg):
        x = gmm.as_points(x)
        self.x = x
        self.cfg = cfg
        self.n, self.d = x.shape
        self.K = theta.n_components
        self.theta = theta
        self.gamma = gmm.e_step(theta, x)
        self.Sinv = np.linalg.inv(theta.covariances)
        self.s = linalg.batched_apply(self.Sinv, x[:, None, :] - theta.means[None])
        self.mass = self.gamma.sum(axis=0)
        self.Fm = (self.gamma.T @ x) / self.mass[:, None]
        self.D = x[:, None, :] - self.Fm[None]
        self.S0 = linalg.batched_gram(self.gamma[:, :, None] * self.D, self.D) / self.mass[:, None, None]
        self.cD = np.sum(self.gamma[:, :, None] * self.D, axis=0)

    def Q(self):
        return 0.5 * (-self.Sinv[None] + self.s[:, :, :, None] * self.s[:, :, None, :])

    def C(self):
        """C[i, k, l] = gamma_ik (delta_kl - gamma_il)."""
        g = self.gamma
        return g[:, :, None] * (np.eye(self.K)[None] - g[:, None, :])

    def E(self):
        """E[i, k] = D D^T - S0_k."""
        return self.D[:, :, :, None] * self.D[:, :, None, :] - self.S0[None]


def d_gamma(theta, x):
    """Partial derivatives of the responsibilities.

    Returns ``(dw, dm, dS, dx)`` with shapes (n, K, K), (n, K, K, d),
    (n, K, K, d, d) and (n, K, d): ``dw[i, k, l] = d gamma_ik / d w_l`` and so
    on; ``dx[i, k, a] = d gamma_ik / d x_ia`` (gamma_i depends only on x_i).
    """
    st = _State(theta, x, gmm.EmConfig(iterations=1))
    C = st.C()
    dw = C / theta.weights[None, None, :]
    dm = C[..., None] * st.s[:, None, :, :]
    dS = C[..., None, None] * st.Q()[:, None]
    g = st.gamma
    dx = g[:, :, None] * (-st.s + np.einsum("il,ila->ia", g, st.s)[:, None, :])
    return dw, dm, dS, dx


def _dgamma_dtheta(st):
    """d gamma / d theta as an (n, K, p) array, frozen columns zeroed."""
    n, K, d = st.n, st.K, st.d
    C = st.C()
    parts = []
    if st.cfg.fix_weights:
        parts.append(np.zeros((n, K, K)))
    else:
        parts.append(C / st.theta.weights[None, None, :])
    parts.append((C[..., None] * st.s[:, None, :, :]).reshape(n, K, K * d))
    if st.cfg.update_covariances:
        parts.append((C[..., None, None] * st.Q()[:, None]).reshape(n, K, K * d * d))
    else:
        parts.append(np.zeros((n, K, K * d * d)))
    return np.concatenate(parts, axis=2)


def _dF_from_dgamma(st, dg):
    """Rows of dF for directions that move gamma only (dx = 0). dg: (n, K, q)."""
    K, d, n = st.K, st.d, st.n
    q = dg.shape[2]
    dF_w = np.zeros((K, q)) if st.cfg.fix_weights else dg.sum(axis=0) / n
    dF_m = np.einsum("ikj,ika->kaj", dg, st.D) / st.mass[:, None, None]
    if st.cfg.update_covariances:
        dF_S = np.einsum("ikj,ikac->kacj", dg, st.E()) / st.mass[:, None, None, None]
        dF_S -= (dF_m[:, :, None, :] * st.cD[:, None, :, None]
                 + st.cD[:, :, None, None] * dF_m[:, None, :, :]) / st.mass[:, None, None, None]
    else:
        dF_S = np.zeros((K, d, d, q))
    return np.concatenate([dF_w, dF_m.reshape(K * d, q), dF_S.reshape(K * d * d, q)], axis=0)


def dF_dtheta(theta, x, cfg):
    """p x p Jacobian of F(., X) at theta."""
    st = _State(theta, x, cfg)
    return _dF_from_dgamma(st, _dgamma_dtheta(st))


def dF_dx(theta, x, cfg):
    """p x (n*d) Jacobian of F(theta, .) at X."""
    return _dF_dx_state(_State(theta, x, cfg))


def _dF_dx_state(st):
    n, K, d = st.n, st.K, st.d
    g = st.gamma
    G = g[:, :, None] * (-st.s + np.einsum("il,ila->ia", g, st.s)[:, None, :])  # (n, K, d)
    inv_mass = 1.0 / st.mass
    eye = np.eye(d)
    # Columns indexed (j, b); gamma_j depends on x_j only, so every block is diagonal in j.
    dF_w = np.zeros((K, n, d)) if st.cfg.fix_weights else np.transpose(G, (1, 0, 2)) / n
    dF_m = (np.einsum("jkb,jka->kajb", G, st.D)
            + g.T[:, None, :, None] * eye[None, :, None, :]) * inv_mass[:, None, None, None]
    if st.cfg.update_covariances:
        dF_S = np.einsum("jkb,jkac->kacjb", G, st.E())
        gD = g[:, :, None] * st.D  # (n, K, d)
        dF_S += np.einsum("ab,jkc->kacjb", eye, gD) + np.einsum("jka,cb->kacjb", gD, eye)
        dF_S -= (dF_m[:, :, None] * st.cD[:, None, :, None, None]
                 + st.cD[:, :, None, None, None] * dF_m[:, None, :])
        dF_S *= inv_mass[:, None, None, None, None]
    else:
        dF_S = np.zeros((K, d, d, n, d))
    return np.concatenate([dF_w.reshape(K, n * d), dF_m.reshape(K * d, n * d),
                           dF_S.reshape(K * d * d, n * d)], axis=0)


def vjp(theta, x, cfg, gbar):
    """Reverse product of a p-vector with dF at (theta, X).

    Returns ``(theta_bar, x_bar)`` with ``theta_bar = gbar^T dF/dtheta`` (length p)
    and ``x_bar = gbar^T dF/dX`` reshaped to (n, d), without forming either
    Jacobian.
    """
    st = _State(theta, x, cfg)
    return _vjp_state(st, gbar)


def _vjp_state(st, gbar):
    n, K, d = st.n, st.K, st.d
    gbar = np.asarray(gbar, dtype=np.float64)
    gw = np.zeros(K) if st.cfg.fix_weights else gbar[:K]
    gm = gbar[K:K + K * d].reshape(K, d)
    if st.cfg.update_covariances:
        gS = gbar[K + K * d:].reshape(K, d, d)
    else:
        gS = np.zeros((K, d, d))
    gSs = gS + np.swapaxes(gS, 1, 2)
    inv_mass = 1.0 / st.mass
    gm_eff = gm - np.einsum("kab,kb->ka", gSs, st.cD) * inv_mass[:, None]
    quad = np.sum(linalg.batched_apply(np.swapaxes(gS, 1, 2), st.D) * st.D, axis=2) - np.einsum("kab,kab->k", gS, st.S0)[None]
    c = gw[None] / n + (np.sum(gm_eff[None] * st.D, axis=2) + quad) * inv_mass[None]
    g = st.gamma
    abar = g * (c - np.sum(c * g, axis=1, keepdims=True))
    # direct dependence of F on x_i, then through log g_l(x_i)
    xbar = (g * inv_mass[None]) @ gm_eff
    xbar += np.sum(linalg.batched_apply(gSs, (g * inv_mass[None])[:, :, None] * st.D), axis=1)
    xbar -= np.sum(abar[:, :, None] * st.s, axis=1)
    wbar = np.zeros(K) if st.cfg.fix_weights else abar.sum(axis=0) / st.theta.weights
    mbar = np.sum(abar[:, :, None] * st.s, axis=0)
    if st.cfg.update_covariances:
        Sbar = 0.5 * (-abar.sum(axis=0)[:, None, None] * st.Sinv
                      + linalg.batched_gram(abar[:, :, None] * st.s, st.s))
    else:
        Sbar = np.zeros((K, d, d))
    return np.concatenate([wbar, mbar.ravel(), Sbar.ravel()]), xbar


def spectral_norm(A, seed=0):
    """Largest singular value by power iteration on A^T A."""
    A = np.asarray(A, dtype=np.float64)
    if not np.any(A):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(POWER_ITERATIONS):
        u = A.T @ (A @ v)
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = u / nu
        new = np.sqrt(nu)
        if abs(new - sigma) <= POWER_TOL * new:
            sigma = new
            break
        sigma = new
    return float(sigma)


def relative_mse(J, J_ref):
    """||J - J_ref||^2 / ||J_ref||^2 (0 when both vanish)."""
    num = float(np.sum((np.asarray(J) - J_ref) ** 2))
    den = float(np.sum(np.asarray(J_ref) ** 2))
    if den == 0.0:
        return 0.0 if num == 0.0 else np.inf
    return num / den


@dataclass
class GradientReport:
    jacobian: np.ndarray
    method: str
    fixed_point_residual: float
    spectral_norm_dF_dtheta: float

    def to_dict(self, include_matrix=False):
        doc = {
            "method": self.method,
            "fixed_point_residual": self.fixed_point_residual,
            "spectral_norm_dF_dtheta": self.spectral_norm_dF_dtheta,
            "rows": int(self.jacobian.shape[0]),
            "cols": int(self.jacobian.shape[1]),
        }
        if include_matrix:
            doc["jacobian"] = self.jacobian.tolist()
        return doc

    def to_json(self, include_matrix=False):
        return json.dumps(self.to_dict(include_matrix))


def _report(J, method, theta, x, cfg, diagnostics, A=None):
    if not diagnostics:
        return GradientReport(J, method, float("nan"), float("nan"))
    if A is None:
        A = dF_dtheta(theta, x, cfg)
    return GradientReport(J, method, gmm.fixed_point_residual(theta, x, cfg), spectral_norm(A))


def jacobian_ad(theta0, x, cfg, diagnostics=True):
    """Exact Jacobian of theta_T(X) by forward accumulation J <- A_t J + B_t."""
    if cfg.iterations < 1:
        raise ArgumentError("AD needs at least one EM iteration")
    x = gmm.as_points(x)
    traj = gmm.em_trajectory(theta0, x, cfg)
    J = None
    for theta in traj[:-1]:
        st = _State(theta, x, cfg)
        B = _dF_dx_state(st)
        J = B if J is None else _dF_from_dgamma(st, _dgamma_dtheta(st)) @ J + B
    return _report(J, "AD", traj[-1], x, cfg, diagnostics)


def jacobian_ai(theta_T, x, cfg, diagnostics=True):
    """Implicit Jacobian (I - dF/dtheta)^{-1} dF/dX at theta_T."""
    x = gmm.as_points(x)
    st = _State(theta_T, x, cfg)
    A = _dF_from_dgamma(st, _dgamma_dtheta(st))
    B = _dF_dx_state(st)
    M = np.eye(A.shape[0]) - A
    cond = np.linalg.cond(M)
    if not cond <= SINGULAR_COND:
        raise SingularSystem(f"I - dF/dtheta is numerically singular (cond {cond:.3g})", condition=cond)
    J = np.linalg.solve(M, B)
    return _report(J, "AI", theta_T, x, cfg, diagnostics, A)


def jacobian_os(theta_T_minus_1, x, cfg, diagnostics=True):
    """One-step Jacobian dF/dX at the penultimate iterate."""
    x = gmm.as_points(x)
    J = dF_dx(theta_T_minus_1, x, cfg)
    return _report(J, "OS", theta_T_minus_1, x, cfg, diagnostics)


def jacobian_fd(theta0, x, cfg, eps=1e-6):
    """Central finite differences of em_fit over every coordinate of X (test oracle)."""
    if not eps > 0:
        raise ArgumentError("eps must be positive")
    x = np.array(gmm.as_points(x), dtype=np.float64)
    n, d = x.shape
    cols = []
    for j in range(n * d):
        xp = x.copy()
        xm = x.copy()
        xp.flat[j] += eps
        xm.flat[j] -= eps
        fp = gmm.em_trajectory(theta0, xp, cfg)[-1].flat()
        fm = gmm.em_trajectory(theta0, xm, cfg)[-1].flat()
        cols.append((fp - fm) / (2 * eps))
    J = np.stack(cols, axis=1)
    theta_T = gmm.em_trajectory(theta0, x, cfg)[-1]
    return _report(J, "FD", theta_T, x, cfg, True)


def warm_start_step(theta_t, x_t, loss_grad, lr, cfg):
    """One warm-start step: theta advances by one EM step and X moves along
    -lr * loss_grad^T dF/dX(theta_t, X_t), theta_t held constant."""
    x_t = gmm.as_points(x_t)
    st = _State(theta_t, x_t, cfg)
    theta_next = gmm.m_step_from_gamma(theta_t, x_t, st.gamma, cfg)
    if lr == 0:
        return theta_next, x_t.copy()
    _, xbar = _vjp_state(st, loss_grad)
    return theta_next, x_t - lr * xbar


def unrolled_vjp(theta0, x, cfg, gbar):
    """gbar^T d theta_T / dX by reverse accumulation over the EM trajectory.

    Returns ``(theta_T, x_bar)``; the trajectory is stored, so memory is
    O(T K d^2 + n d).
    """
    x = gmm.as_points(x)
    traj = gmm.em_trajectory(theta0, x, cfg)
    lam = np.asarray(gbar, dtype=np.float64)
    xbar = np.zeros_like(x)
    for theta in reversed(traj[:-1]):
        lam, xb = vjp(theta, x, cfg, lam)
        xbar += xb
    return traj[-1], xbar


def os_vjp(theta0, x, cfg, gbar):
    """gbar^T dF/dX at theta_{T-1}; returns ``(theta_T, x_bar)``."""
    x = gmm.as_points(x)
    traj = gmm.em_trajectory(theta0, x, cfg)
    _, xbar = vjp(traj[-2], x, cfg, gbar)
    return traj[-1], xbar


def ai_vjp(theta_T, x, cfg, gbar):
    """gbar^T (I - dF/dtheta)^{-1} dF/dX at theta_T, via one transposed solve."""
    x = gmm.as_points(x)
    st = _State(theta_T, x, cfg)
    A = _dF_from_dgamma(st, _dgamma_dtheta(st))
    M = np.eye(A.shape[0]) - A
    cond = np.linalg.cond(M)
    if not cond <= SINGULAR_COND:
        raise SingularSystem(f"I - dF/dtheta is numerically singular (cond {cond:.3g})", condition=cond)
    y = np.linalg.solve(M.T, np.asarray(gbar, dtype=np.float64))
    return _vjp_state(st, y)[1]


def warm_start_loss_step(theta_t, x_t, loss_fn, cfg):
    """Warm-start step driven by a loss on theta.

    ``loss_fn(theta) -> (value, flat_grad)`` is evaluated at F(theta_t, X_t).
    Returns ``(theta_next, value, x_bar)`` where ``x_bar`` is the data
    gradient with theta_t held constant.
    """
    x_t = gmm.as_points(x_t)
    st = _State(theta_t, x_t, cfg)
    theta_next = gmm.m_step_from_gamma(theta_t, x_t, st.gamma, cfg)
    value, grad = loss_fn(theta_next)
    _, xbar = _vjp_state(st, grad)
    return theta_next, value, xbar
