"""Gaussian mixtures: parameters, densities, EM steps, init and sampling.

Random draws use numpy's PCG64 generator (``np.random.default_rng``), so a
given integer seed reproduces the same stream on every platform.
"""
from dataclasses import dataclass, field

import numpy as np

from diffem import linalg
from diffem.errors import ArgumentError, DegenerateCovariance

LOG_2PI = np.log(2.0 * np.pi)
WEIGHT_SUM_TOL = 1e-12


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GmmParams:
    """Mixture parameters ``(w, m, S)``.

    weights: (K,), means: (K, d), covariances: (K, d, d). With
    ``normalised=False`` the weights only need to be positive, which is what
    the unbalanced transport cost works with.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    normalised: bool = field(default=True)

    def __post_init__(self):
        w, m, S = _frozen(self.weights), _frozen(self.means), _frozen(self.covariances)
        if w.ndim != 1 or m.ndim != 2 or S.ndim != 3:
            raise ArgumentError("expected weights (K,), means (K, d), covariances (K, d, d)")
        K, d = m.shape
        if w.shape[0] != K or S.shape != (K, d, d):
            raise ArgumentError(f"inconsistent shapes {w.shape}, {m.shape}, {S.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(m)) and np.all(np.isfinite(S))):
            raise ArgumentError("non-finite mixture parameters")
        if np.any(w <= 0):
            raise ArgumentError("weights must be positive")
        if self.normalised:
            if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL * max(1, K) or np.any(w > 1):
                raise ArgumentError(f"weights sum to {w.sum()!r}, not 1")
        asym = np.abs(S - np.swapaxes(S, 1, 2)).max(initial=0.0)
        if asym > linalg.SYM_RTOL * max(np.abs(S).max(initial=0.0), 1e-300):
            raise ArgumentError("covariances are not symmetric")
        linalg.cholesky(S)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covariances", S)

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_params(self):
        K, d = self.means.shape
        return K + K * d + K * d * d

    def flat(self):
        """Flat vector ``[w | m row-major | S row-major]`` of length K + Kd + Kd^2."""
        return np.concatenate([self.weights, self.means.ravel(), self.covariances.ravel()])

    @classmethod
    def from_flat(cls, v, K, d, normalised=True):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (K + K * d + K * d * d,):
            raise ArgumentError(f"flat vector has shape {v.shape}, expected ({K + K * d + K * d * d},)")
        w = v[:K]
        m = v[K:K + K * d].reshape(K, d)
        S = v[K + K * d:].reshape(K, d, d)
        return cls(w, m, S, normalised)

    def permuted(self, order):
        order = np.asarray(order)
        return GmmParams(self.weights[order], self.means[order], self.covariances[order], self.normalised)

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, doc, normalised=True):
        try:
            return cls(np.asarray(doc["weights"]), np.asarray(doc["means"]),
                       np.asarray(doc["covariances"]), normalised)
        except KeyError as exc:
            raise ArgumentError(f"GMM document lacks key {exc}") from None


def check_dataset(x):
    """Validate a point cloud; returns it as a float (n, d) array.

    Requires n >= d + 1 and mean-centred points spanning R^d.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ArgumentError(f"expected an (n, d) point array, got shape {x.shape}")
    n, d = x.shape
    if not np.all(np.isfinite(x)):
        raise ArgumentError("dataset contains non-finite values")
    if n < d + 1:
        raise ArgumentError(f"need at least d + 1 = {d + 1} points, got {n}")
    if np.linalg.matrix_rank(x - x.mean(axis=0)) < d:
        raise ArgumentError("centred points do not span R^d (not in general position)")
    return x


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated point cloud (n, d)."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(check_dataset(self.points)))

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]


def as_points(x):
    if isinstance(x, Dataset):
        return x.points
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ArgumentError(f"expected an (n, d) point array, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class EmConfig:
    iterations: int = 10
    fix_weights: bool = False
    update_covariances: bool = True
    cov_regulariser: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ArgumentError("iterations must be >= 0")
        if not self.cov_regulariser >= 0:
            raise ArgumentError("cov_regulariser must be >= 0")


@dataclass
class EmDiagnostics:
    log_likelihoods: list
    residual: float


def log_density(mean, cov_chol, x):
    """log N(x; mean, L L^T) for a single point."""
    mean = np.asarray(mean, dtype=np.float64)
    L = cov_chol.lower
    z = np.linalg.solve(L, np.asarray(x, dtype=np.float64) - mean)
    d = mean.shape[0]
    return float(-0.5 * d * LOG_2PI - np.sum(np.log(np.diag(L))) - 0.5 * z @ z)


def log_densities(theta, x):
    """Matrix of log g_k(x_i), shape (n, K)."""
    x = as_points(x)
    chol = linalg.cholesky(theta.covariances)
    Linv = chol.inverse()
    z = linalg.batched_apply(Linv, x[:, None, :] - theta.means[None, :, :])
    d = x.shape[1]
    return -0.5 * d * LOG_2PI - 0.5 * chol.logdet[None, :] - 0.5 * np.sum(z * z, axis=2)


def _log_joint(theta, x):
    return np.log(theta.weights)[None, :] + log_densities(theta, x)


def log_responsibilities(theta, x):
    lj = _log_joint(theta, x)
    return lj - linalg.logsumexp_rows(lj)[:, None]


def e_step(theta, x):
    """Responsibilities gamma (n, K); rows sum to one."""
    return np.exp(log_responsibilities(theta, x))


def log_likelihood(theta, x):
    """sum_i log sum_k w_k g_k(x_i)."""
    return float(np.sum(linalg.logsumexp_rows(_log_joint(theta, x))))


def m_step_from_gamma(theta, x, gamma, cfg):
    n, d = x.shape
    mass = gamma.sum(axis=0)
    empty = np.flatnonzero(mass <= 0)
    if empty.size:
        raise DegenerateCovariance(f"component {empty[0]} has no responsibility mass",
                                   component=int(empty[0]))
    weights = theta.weights.copy() if cfg.fix_weights else mass / n
    means = (gamma.T @ x) / mass[:, None]
    if cfg.update_covariances:
        diff = x[:, None, :] - means[None, :, :]
        covs = linalg.batched_gram(gamma[:, :, None] * diff, diff) / mass[:, None, None]
        covs = linalg.symmetrize(covs) + cfg.cov_regulariser * np.eye(d)
    else:
        covs = theta.covariances
    try:
        return GmmParams(weights, means, covs)
    except DegenerateCovariance as exc:
        raise DegenerateCovariance(f"M-step produced a singular covariance: {exc}",
                                   pivot=exc.pivot, component=exc.component) from None


def m_step(theta, x, cfg):
    """One EM iteration F(theta, X): E-step followed by the closed-form M-step."""
    x = as_points(x)
    return m_step_from_gamma(theta, x, e_step(theta, x), cfg)


def em_trajectory(theta0, x, cfg):
    """List [theta_0, ..., theta_T] of EM iterates."""
    x = as_points(x)
    traj = [theta0]
    for _ in range(cfg.iterations):
        traj.append(m_step(traj[-1], x, cfg))
    return traj


def fixed_point_residual(theta, x, cfg):
    """(1/p) ||theta - F(theta, X)||^2."""
    diff = theta.flat() - m_step(theta, x, cfg).flat()
    return float(diff @ diff) / theta.n_params


def em_fit(theta0, x, cfg):
    """Run exactly ``cfg.iterations`` EM steps; returns (theta_T, diagnostics)."""
    x = as_points(x)
    theta = theta0
    lls = [log_likelihood(theta, x)]
    for _ in range(cfg.iterations):
        theta = m_step(theta, x, cfg)
        lls.append(log_likelihood(theta, x))
    return theta, EmDiagnostics(lls, fixed_point_residual(theta, x, cfg))


def empirical_covariance(x):
    x = as_points(x)
    c = x - x.mean(axis=0)
    return linalg.symmetrize(c.T @ c / x.shape[0])


def kmeanspp_init(x, K, seed, cov_regulariser=0.0):
    """k-means++ means, uniform weights, global covariance + eps_r I for every component."""
    x = as_points(x)
    n, d = x.shape
    if K < 1 or K > n:
        raise ArgumentError(f"need 1 <= K <= n, got K={K}, n={n}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            # searchsorted on the cumulative mass: lowest index wins ties, zero-mass points never drawn
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = next(i for i in range(n) if i not in chosen)
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    cov = empirical_covariance(x) + cov_regulariser * np.eye(d)
    return GmmParams(np.full(K, 1.0 / K), x[chosen], np.repeat(cov[None], K, axis=0))


def sample_gmm(theta, n, seed):
    """n i.i.d. draws, returned as an (n, d) array."""
    if n < 1:
        raise ArgumentError("n must be >= 1")
    rng = np.random.default_rng(seed)
    w = theta.weights / theta.weights.sum()
    comp = rng.choice(theta.n_components, size=n, p=w)
    z = rng.standard_normal((n, theta.dim))
    L = linalg.cholesky(theta.covariances).lower
    return theta.means[comp] + np.einsum("iab,ib->ia", L[comp], z)
