"""Finite-difference oracles for the analytic EM differentials.

Covariance coordinates are perturbed symmetrically, along (E_ab + E_ba) / 2,
since a covariance is only ever read as a symmetric matrix. The analytic
columns for (a, b) and (b, a) are equal, so each matches that derivative.
"""
import numpy as np

from diffem import emdiff, gmm
from diffem.errors import DegenerateCovariance

FD_STEP = 1e-6


def _theta_directions(theta):
    """Unit perturbations of the flat vector, symmetrised on covariance entries."""
    K, d = theta.n_components, theta.dim
    p = theta.n_params
    base = K + K * d
    for j in range(p):
        e = np.zeros(p)
        if j < base:
            e[j] = 1.0
        else:
            k, r = divmod(j - base, d * d)
            a, b = divmod(r, d)
            e[base + k * d * d + a * d + b] += 0.5
            e[base + k * d * d + b * d + a] += 0.5
        yield j, e


def _shift(theta, e, h):
    K, d = theta.n_components, theta.dim
    return gmm.GmmParams.from_flat(theta.flat() + h * e, K, d, normalised=False)


def fd_dF_dtheta(theta, x, cfg, h=FD_STEP):
    p = theta.n_params
    J = np.zeros((p, p))
    for j, e in _theta_directions(theta):
        if cfg.fix_weights and j < theta.n_components:
            continue  # frozen weights: the column is zero by convention
        fp = gmm.m_step(_shift(theta, e, h), x, cfg).flat()
        fm = gmm.m_step(_shift(theta, e, -h), x, cfg).flat()
        J[:, j] = (fp - fm) / (2 * h)
    return _freeze(J, theta, cfg)


def _freeze(J, theta, cfg):
    # frozen quantities neither move nor influence anything
    K, d = theta.n_components, theta.dim
    if cfg.fix_weights:
        J[:K] = 0.0
        J[:, :K] = 0.0
    if not cfg.update_covariances:
        J[K + K * d:] = 0.0
        J[:, K + K * d:] = 0.0
    return J


def fd_dF_dx(theta, x, cfg, h=FD_STEP):
    x = np.array(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[j] += h
        xm.flat[j] -= h
        cols.append((gmm.m_step(theta, xp, cfg).flat() - gmm.m_step(theta, xm, cfg).flat()) / (2 * h))
    J = np.stack(cols, axis=1)
    K, d = theta.n_components, theta.dim
    if cfg.fix_weights:
        J[:K] = 0.0
    if not cfg.update_covariances:
        J[K + K * d:] = 0.0
    return J


def fd_d_gamma(theta, x, h=FD_STEP):
    """FD of the responsibilities: (dw, dm, dS, dx) shaped like :func:`emdiff.d_gamma`."""
    x = np.array(x, dtype=np.float64)
    n, d = x.shape
    K = theta.n_components
    cols = np.zeros((n, K, theta.n_params))
    for j, e in _theta_directions(theta):
        gp = gmm.e_step(_shift(theta, e, h), x)
        gm = gmm.e_step(_shift(theta, e, -h), x)
        cols[:, :, j] = (gp - gm) / (2 * h)
    dw = cols[:, :, :K]
    dm = cols[:, :, K:K + K * d].reshape(n, K, K, d)
    dS = cols[:, :, K + K * d:].reshape(n, K, K, d, d)
    dx = np.zeros((n, K, d))
    for i in range(n):
        for a in range(d):
            xp, xm = x.copy(), x.copy()
            xp[i, a] += h
            xm[i, a] -= h
            dx[i, :, a] = (gmm.e_step(theta, xp)[i] - gmm.e_step(theta, xm)[i]) / (2 * h)
    return dw, dm, dS, dx


def relative_error(A, B, floor=1e-12):
    """||A - B|| / ||B||; for a vanishing B, ||A|| itself (must be ~0)."""
    nb = float(np.linalg.norm(B))
    diff = float(np.linalg.norm(np.asarray(A) - B))
    return diff / nb if nb > floor else diff


def random_instance(rng, n_max=6, d_max=3, K_max=3):
    """Random well-posed (theta, X, cfg) for the oracle suite."""
    while True:
        d = int(rng.integers(1, d_max + 1))
        K = int(rng.integers(1, K_max + 1))
        n = int(rng.integers(max(d + 1, 2), n_max + 1)) if n_max >= d + 1 else d + 1
        x = rng.standard_normal((n, d))
        w = rng.uniform(0.5, 1.5, K)
        w /= w.sum()
        m = x[rng.choice(n, K, replace=n < K)] + 0.3 * rng.standard_normal((K, d))
        A = rng.standard_normal((K, d, d))
        S = np.einsum("kab,kcb->kac", A, A) / d + 0.5 * np.eye(d)
        cfg = gmm.EmConfig(1, fix_weights=bool(rng.integers(2)),
                           update_covariances=bool(rng.integers(2)),
                           cov_regulariser=float(rng.choice([0.0, 0.05])))
        try:
            theta = gmm.GmmParams(w, m, S)
            gmm.m_step(theta, x, cfg)
        except DegenerateCovariance:
            continue
        return theta, x, cfg


def check_instance(theta, x, cfg):
    """Relative errors of every analytic block against finite differences."""
    K, d = theta.n_components, theta.dim
    sl = {"w": slice(0, K), "m": slice(K, K + K * d), "S": slice(K + K * d, None)}
    errs = {}
    a_gamma = emdiff.d_gamma(theta, x)
    f_gamma = fd_d_gamma(theta, x)
    for name, a, f in zip(("dgamma_dw", "dgamma_dm", "dgamma_dS", "dgamma_dx"), a_gamma, f_gamma):
        errs[name] = relative_error(a, f)
    At, Ft = emdiff.dF_dtheta(theta, x, cfg), fd_dF_dtheta(theta, x, cfg)
    Ax, Fx = emdiff.dF_dx(theta, x, cfg), fd_dF_dx(theta, x, cfg)
    for r, rs in sl.items():
        for c, cs in sl.items():
            errs[f"dF{r}_d{c}"] = relative_error(At[rs, cs], Ft[rs, cs])
        errs[f"dF{r}_dX"] = relative_error(Ax[rs], Fx[rs])
    return errs


def run_selfcheck(instances=50, seed=0, rtol=1e-5):
    """FD-vs-analytic suite; returns a report with the worst error per block."""
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(instances):
        theta, x, cfg = random_instance(rng)
        for k, v in check_instance(theta, x, cfg).items():
            worst[k] = max(worst.get(k, 0.0), v)
    ok = all(v <= rtol for v in worst.values())
    return {"instances": instances, "rtol": rtol, "passed": ok,
            "max_error": max(worst.values()), "worst": worst}
