"""Optimal transport between Gaussian mixtures.

MW2^2 is the discrete OT problem between mixture weights with pairwise
Gaussian W2^2 costs. The balanced problem is solved exactly with a
transportation (network) simplex; the unbalanced one with log-domain
scaling iterations whose entropic parameter is annealed towards zero.
"""
from dataclasses import dataclass

import numpy as np

from diffem import linalg
from diffem.errors import ArgumentError, NotConverged
from diffem.gmm import GmmParams

MARGINAL_TOL = 1e-9
WARMUP_SWEEPS = 20
COST_FLOOR = -1e-10


# ----------------------------------------------------------------------------
# Gaussian W2 and the Bures metric


def bures_squared(S0, S1):
    """tr(S0 + S1 - 2 (S0^1/2 S1 S0^1/2)^1/2), clamped at 0. Broadcasts over stacks."""
    S0 = linalg.symmetrize(S0)
    S1 = linalg.symmetrize(S1)
    R = linalg.spd_sqrt(S0)
    cross = linalg.spd_sqrt(R @ S1 @ R)
    tr = lambda a: np.trace(a, axis1=-2, axis2=-1)
    val = tr(S0) + tr(S1) - 2.0 * tr(cross)
    return np.maximum(val, 0.0)


def bures_distance(S0, S1):
    return float(np.sqrt(bures_squared(S0, S1)))


def gaussian_w2(m0, S0, m1, S1):
    """Squared W2 distance between N(m0, S0) and N(m1, S1)."""
    dm = np.asarray(m0, dtype=np.float64) - np.asarray(m1, dtype=np.float64)
    return float(dm @ dm + bures_squared(S0, S1))


def bures_grad(S0, S1):
    """Gradient of bures_squared(., S1) at S0 (symmetric, same stacking as S0).

    Chain rule through both square roots using the explicit differential;
    zero divisors are masked with a NearSingularWarning.
    """
    S0 = linalg.symmetrize(S0)
    S1 = linalg.symmetrize(S1)
    d = S0.shape[-1]
    eye = np.broadcast_to(np.eye(d), S0.shape)
    R = linalg.spd_sqrt(S0)
    M = linalg.symmetrize(R @ S1 @ R)
    Mbar = linalg.spd_sqrt_differential(M, eye)
    Rbar = Mbar @ R @ S1 + S1 @ R @ Mbar
    Sbar = linalg.spd_sqrt_differential(S0, linalg.symmetrize(Rbar))
    return eye - 2.0 * Sbar


def cost_matrix(mu0, mu1):
    """C[k, l] = ||m_k - m_l||^2 + d_BW^2(S_k, S_l), clamped at 0."""
    if mu0.dim != mu1.dim:
        raise ArgumentError("mixtures live in different dimensions")
    dm = mu0.means[:, None, :] - mu1.means[None, :, :]
    K0, K1 = mu0.n_components, mu1.n_components
    S0 = np.broadcast_to(mu0.covariances[:, None], (K0, K1) + mu0.covariances.shape[1:])
    S1 = np.broadcast_to(mu1.covariances[None, :], (K0, K1) + mu1.covariances.shape[1:])
    c = np.sum(dm * dm, axis=2) + bures_squared(S0, S1)
    return np.where(c < 0.0, 0.0, c)


# ----------------------------------------------------------------------------
# Exact discrete OT (transportation simplex)


@dataclass
class OtSolution:
    plan: np.ndarray
    cost: float
    u: np.ndarray
    v: np.ndarray
    pivots: int


def _potentials(c, basis, m, n):
    """Solve u_i + v_j = c_ij on the basic cells (a spanning tree), u_0 = 0."""
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    rows = [[] for _ in range(m)]
    cols = [[] for _ in range(n)]
    for i, j in basis:
        rows[i].append(j)
        cols[j].append(i)
    stack = [("r", 0)]
    while stack:
        kind, a = stack.pop()
        if kind == "r":
            for j in rows[a]:
                if np.isnan(v[j]):
                    v[j] = c[a, j] - u[a]
                    stack.append(("c", j))
        else:
            for i in cols[a]:
                if np.isnan(u[i]):
                    u[i] = c[i, a] - v[a]
                    stack.append(("r", i))
    return u, v


def _cycle(basis, m, n, i0, j0):
    """Tree path from column j0 back to row i0, as a list of cells (alternating signs)."""
    adj = {}
    for i, j in basis:
        adj.setdefault(("r", i), []).append(("c", j))
        adj.setdefault(("c", j), []).append(("r", i))
    parent = {("r", i0): None}
    order = [("r", i0)]
    for node in order:
        for nb in sorted(adj.get(node, [])):
            if nb not in parent:
                parent[nb] = node
                order.append(nb)
    path = []
    node = ("c", j0)
    while parent[node] is not None:
        prev = parent[node]
        cell = (node[1], prev[1]) if node[0] == "r" else (prev[1], node[1])
        path.append(cell)
        node = prev
    return path


def solve_discrete_ot(c, w0, w1, max_pivots=None):
    """Exact balanced OT by the transportation simplex.

    Northwest-corner start, Bland's rule for the entering cell (first
    negative reduced cost in row-major order) and the leaving cell (smallest
    flow on the cycle, lowest (k, l) on ties). Returns an :class:`OtSolution`
    with the plan, its cost and dual potentials (u, v).
    """
    c = np.asarray(c, dtype=np.float64)
    a = np.asarray(w0, dtype=np.float64).ravel()
    b = np.asarray(w1, dtype=np.float64).ravel()
    m, n = c.shape
    if a.shape[0] != m or b.shape[0] != n:
        raise ArgumentError(f"cost {c.shape} does not match marginals ({a.size}, {b.size})")
    if np.any(a < 0) or np.any(b < 0):
        raise ArgumentError("marginals must be nonnegative")
    if abs(a.sum() - b.sum()) > MARGINAL_TOL:
        raise ArgumentError(f"marginals have different mass ({a.sum()!r} vs {b.sum()!r})")
    if not np.all(np.isfinite(c)):
        raise ArgumentError("cost matrix has non-finite entries")

    flow = np.zeros((m, n))
    basis = []
    sa, sb = a.copy(), b.copy()
    i = j = 0
    for _ in range(m + n - 1):
        f = min(sa[i], sb[j])
        flow[i, j] = f
        basis.append((i, j))
        sa[i] -= f
        sb[j] -= f
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif sa[i] <= sb[j]:
            i += 1
        else:
            j += 1

    tol = 1e-12 * max(1.0, float(np.abs(c).max(initial=0.0)))
    max_pivots = max_pivots or 50 * (m + n) * m * n + 100
    pivots = 0
    basic = np.zeros((m, n), dtype=bool)
    for cell in basis:
        basic[cell] = True
    while True:
        u, v = _potentials(c, basis, m, n)
        red = c - u[:, None] - v[None, :]
        cand = np.argwhere((red < -tol) & ~basic)
        if cand.size == 0:
            break
        if pivots >= max_pivots:
            raise NotConverged("transportation simplex exceeded its pivot budget", result=flow)
        i0, j0 = (int(t) for t in cand[0])
        path = _cycle(basis, m, n, i0, j0)
        minus = path[0::2]
        theta = min(flow[cell] for cell in minus)
        leave = min(cell for cell in minus if flow[cell] == theta)
        flow[i0, j0] += theta
        for k, cell in enumerate(path):
            flow[cell] += -theta if k % 2 == 0 else theta
        flow[leave] = 0.0
        basis.remove(leave)
        basis.append((i0, j0))
        basic[leave] = False
        basic[i0, j0] = True
        pivots += 1
    flow = np.maximum(flow, 0.0)
    return OtSolution(flow, float(np.sum(flow * c)), u, v, pivots)


def brute_force_ot(c, w0, w1):
    """Minimum of <P, C> over the vertices of the transport polytope (small sizes only).

    Every vertex has a spanning-forest support; enumerate (m + n - 1)-subsets
    of cells, solve the square system on each, and keep feasible solutions.
    """
    from itertools import combinations

    c = np.asarray(c, dtype=np.float64)
    a = np.asarray(w0, dtype=np.float64)
    b = np.asarray(w1, dtype=np.float64)
    m, n = c.shape
    cells = [(i, j) for i in range(m) for j in range(n)]
    A = np.zeros((m + n, m * n))
    for idx, (i, j) in enumerate(cells):
        A[i, idx] = 1.0
        A[m + j, idx] = 1.0
    rhs = np.concatenate([a, b])
    best, best_plan = np.inf, None
    r = m + n - 1
    for subset in combinations(range(m * n), r):
        sub = A[:, subset]
        if np.linalg.matrix_rank(sub) < r:
            continue
        x, *_ = np.linalg.lstsq(sub, rhs, rcond=None)
        if np.any(x < -1e-12) or np.abs(sub @ x - rhs).max() > 1e-10:
            continue
        plan = np.zeros(m * n)
        plan[list(subset)] = np.maximum(x, 0.0)
        val = float(plan @ c.ravel())
        if val < best:
            best, best_plan = val, plan.reshape(m, n)
    return best_plan, best


# ----------------------------------------------------------------------------
# MW2


def mw2_squared(mu0, mu1):
    """MW2^2 between two normalised mixtures; returns (value, plan)."""
    sol = solve_discrete_ot(cost_matrix(mu0, mu1), mu0.weights, mu1.weights)
    return sol.cost, sol.plan


@dataclass
class Mw2Gradient:
    value: float
    plan: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray

    def flat(self):
        """Gradient in the flat parameter layout [w | m | S]."""
        return np.concatenate([self.weights, self.means.ravel(), self.covariances.ravel()])


def plan_grad_params(mu0, mu1, plan):
    """Gradient of sum_kl P_kl W2^2(g_k, g_l) in mu0's means and covariances, P fixed."""
    plan = np.asarray(plan, dtype=np.float64)
    K0, K1 = plan.shape
    dm = mu0.means[:, None, :] - mu1.means[None, :, :]
    gm = 2.0 * np.einsum("kl,kla->ka", plan, dm)
    S0 = np.broadcast_to(mu0.covariances[:, None], (K0, K1) + mu0.covariances.shape[1:])
    S1 = np.broadcast_to(mu1.covariances[None, :], (K0, K1) + mu1.covariances.shape[1:])
    gS = np.einsum("kl,klab->kab", plan, bures_grad(S0, S1))
    return gm, gS


def mw2_grad_params(mu0, mu1, weights=False):
    """Envelope gradient of MW2^2(mu0, mu1) with respect to mu0.

    Means and covariances are differentiated with the optimal plan held
    fixed. With ``weights=True`` the weight gradient is the row dual
    potential of the transport problem (defined up to an additive constant,
    which is irrelevant on the simplex); otherwise it is zero.
    """
    sol = solve_discrete_ot(cost_matrix(mu0, mu1), mu0.weights, mu1.weights)
    gm, gS = plan_grad_params(mu0, mu1, sol.plan)
    gw = sol.u - sol.u.mean() if weights else np.zeros(mu0.n_components)
    return Mw2Gradient(sol.cost, sol.plan, gm, gS, gw)


# ----------------------------------------------------------------------------
# Unbalanced MW2


@dataclass(frozen=True)
class UnbalancedConfig:
    lambda0: float = 10.0
    lambda1: float = 0.1
    entropic_eps: float = 1e-4
    max_iter: int = 5000
    tol: float = 1e-10
    eps_start: float = 1e-1
    eps_decay: float = 0.5

    def __post_init__(self):
        if not (self.lambda0 > 0 and self.lambda1 > 0):
            raise ArgumentError("lambda0 and lambda1 must be positive")
        if not self.entropic_eps > 0:
            raise ArgumentError("entropic_eps must be positive")
        if not 0 < self.eps_decay < 1:
            raise ArgumentError("eps_decay must lie in (0, 1)")


def kl_generalised(p, q):
    """sum p log(p/q) - p + q with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return float(np.sum(t - p + q))


def unbalanced_objective(plan, c, a, b, lambda0, lambda1):
    return float(np.sum(plan * c) + lambda0 * kl_generalised(plan.sum(axis=1), a)
                 + lambda1 * kl_generalised(plan.sum(axis=0), b))


def _eps_schedule(cfg):
    eps = [max(cfg.eps_start, cfg.entropic_eps)]
    while eps[-1] > cfg.entropic_eps:
        eps.append(max(eps[-1] * cfg.eps_decay, cfg.entropic_eps))
    return eps


def _dual_terms(f, g, c, la, lb, eps, l0, l1):
    logp = la[:, None] + lb[None, :] + (f[:, None] + g[None, :] - c) / eps
    with np.errstate(over="ignore"):
        plan = np.exp(logp)
        ra = np.exp(la - f / l0)
        rb = np.exp(lb - g / l1)
    return plan, ra, rb


def _dual_value(f, g, c, a, b, la, lb, eps, l0, l1):
    plan, ra, rb = _dual_terms(f, g, c, la, lb, eps, l0, l1)
    val = -l0 * np.sum(ra - a) - l1 * np.sum(rb - b) - eps * np.sum(plan - a[:, None] * b[None, :])
    return val if np.isfinite(val) else -np.inf


def _scaling_sweep(f, g, c, la, lb, eps, l0, l1):
    k0, k1 = l0 * eps / (l0 + eps), l1 * eps / (l1 + eps)
    f = -k0 * linalg.logsumexp_rows(lb[None, :] + (g[None, :] - c) / eps)
    g = -k1 * linalg.logsumexp_rows((la[:, None] + (f[:, None] - c) / eps).T)
    # optimal translation (f + t, g - t) of the dual objective
    t = (l0 * l1 / (l0 + l1)) * (linalg.logsumexp(la - f / l0) - linalg.logsumexp(lb - g / l1))
    return f + t, g - t


def solve_unbalanced(c, a, b, cfg):
    """Unbalanced OT with generalised KL marginal penalties.

    For each entropic level of the annealing schedule, a few log-domain
    scaling sweeps (each followed by the optimal dual translation) warm up
    the potentials, then Newton steps with backtracking on the concave dual
    finish the stage; the problems are tiny (K0 + K1 unknowns). Stops when
    the marginal optimality residual is below ``tol``. Returns
    (plan, value without the entropic term).
    """
    c = np.asarray(c, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ArgumentError("unbalanced marginals must be positive")
    l0, l1 = cfg.lambda0, cfg.lambda1
    la, lb = np.log(a), np.log(b)
    m = a.shape[0]
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    used = 0
    scale = max(1.0, a.sum(), b.sum())
    eps_list = _eps_schedule(cfg)
    for stage, eps in enumerate(eps_list):
        for _ in range(WARMUP_SWEEPS):
            f, g = _scaling_sweep(f, g, c, la, lb, eps, l0, l1)
            used += 1
        converged = False
        value = _dual_value(f, g, c, a, b, la, lb, eps, l0, l1)
        while used < cfg.max_iter:
            used += 1
            plan, ra, rb = _dual_terms(f, g, c, la, lb, eps, l0, l1)
            r1, r2 = plan.sum(axis=1), plan.sum(axis=0)
            grad = np.concatenate([ra - r1, rb - r2])
            if np.abs(grad).max() <= cfg.tol * scale:
                converged = True
                break
            H = np.zeros((grad.size, grad.size))
            H[:m, :m] = np.diag(ra / l0 + r1 / eps)
            H[m:, m:] = np.diag(rb / l1 + r2 / eps)
            H[:m, m:] = plan / eps
            H[m:, :m] = plan.T / eps
            step = np.linalg.solve(H, grad)
            slope = float(grad @ step)
            t = 1.0
            if slope <= 1e-12 * (1.0 + abs(value)):
                # the gain is below the resolution of the dual value: the
                # line search cannot judge it, and a full Newton step is safe here
                f, g = f + step[:m], g + step[m:]
                value = _dual_value(f, g, c, a, b, la, lb, eps, l0, l1)
                continue
            while t > 1e-12:
                fn, gn = f + t * step[:m], g + t * step[m:]
                vn = _dual_value(fn, gn, c, a, b, la, lb, eps, l0, l1)
                if vn >= value + 1e-4 * t * slope or (vn >= value and t < 1e-6):
                    break
                t *= 0.5
            if t <= 1e-12:
                # no ascent along the Newton direction: fall back to a scaling sweep
                f, g = _scaling_sweep(f, g, c, la, lb, eps, l0, l1)
                value = _dual_value(f, g, c, a, b, la, lb, eps, l0, l1)
            else:
                f, g, value = fn, gn, vn
        if not converged and stage == len(eps_list) - 1:
            raise NotConverged(f"unbalanced solver did not converge in {cfg.max_iter} iterations",
                               result=_dual_terms(f, g, c, la, lb, eps, l0, l1)[0])
    plan = _dual_terms(f, g, c, la, lb, eps_list[-1], l0, l1)[0]
    return plan, unbalanced_objective(plan, c, a, b, l0, l1)


def umw2_squared(mu0, mu1, cfg):
    """Unbalanced MW2 between mixtures with positive (not necessarily normalised) weights."""
    plan, value = solve_unbalanced(cost_matrix(mu0, mu1), mu0.weights, mu1.weights, cfg)
    return value, plan


def umw2_grad_params(mu0, mu1, cfg):
    """Plan-fixed gradient of UMW2 in mu0's means and covariances."""
    value, plan = umw2_squared(mu0, mu1, cfg)
    gm, gS = plan_grad_params(mu0, mu1, plan)
    return Mw2Gradient(value, plan, gm, gS, np.zeros(mu0.n_components))


# ----------------------------------------------------------------------------
# Projection and stability checks


def project_gmm(mu, axes):
    """Push a mixture through x -> A x for A with orthonormal rows."""
    A = np.asarray(axes, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != mu.dim:
        raise ArgumentError(f"axes must be (d', {mu.dim}), got {A.shape}")
    if np.abs(A @ A.T - np.eye(A.shape[0])).max() > 1e-8:
        raise ArgumentError("projection rows are not orthonormal")
    covs = linalg.symmetrize(np.einsum("ia,kab,jb->kij", A, mu.covariances, A))
    return GmmParams(mu.weights, mu.means @ A.T, covs, mu.normalised)


def coordinate_projection(d, keep):
    """Rows of the identity selecting the coordinates in ``keep``."""
    return np.eye(d)[list(keep)]


def perturb_gmm(mu, scale, rng):
    """Random nearby mixture: jittered weights, shifted means, congruence-perturbed covariances."""
    K, d = mu.n_components, mu.dim
    w = mu.weights * np.exp(scale * rng.standard_normal(K))
    w /= w.sum()
    m = mu.means + scale * rng.standard_normal((K, d))
    P = np.eye(d) + scale * rng.standard_normal((K, d, d))
    S = linalg.symmetrize(P @ mu.covariances @ np.swapaxes(P, 1, 2))
    return GmmParams(w, m, S)


@dataclass
class StabilityInstance:
    mu0: GmmParams
    mu0_hat: GmmParams
    mu1: GmmParams
    mu1_hat: GmmParams


def _pairwise_w2(a, b):
    return cost_matrix(a, b)


def one_sample_bound(mu, mu_hat):
    """(LHS, RHS) of the one-sample bound with rho's measured on this instance."""
    lhs, _ = mw2_squared(mu_hat, mu)
    cross = _pairwise_w2(mu_hat, mu)
    rho_n = float(np.max(np.diag(cross)))
    rho_w = float(np.abs(mu.weights - mu_hat.weights).sum())
    rhs = rho_n + 0.5 * rho_w * float(cross.max())
    return lhs, rhs


def two_sample_bound(inst):
    """(LHS, RHS) of the two-sample bound with R's and rho's measured on this instance."""
    lhs = abs(mw2_squared(inst.mu0_hat, inst.mu1_hat)[0] - mw2_squared(inst.mu0, inst.mu1)[0])
    pairs = [(inst.mu0, inst.mu0_hat), (inst.mu1, inst.mu1_hat)]
    all_mix = [inst.mu0, inst.mu0_hat, inst.mu1, inst.mu1_hat]
    R_m = max(float(np.linalg.norm(mx.means, axis=1).max()) for mx in all_mix)
    R_S = max(float(np.sqrt(np.trace(mx.covariances, axis1=1, axis2=2).max())) for mx in all_mix)
    rho_w = max(float(np.abs(p.weights - q.weights).sum()) for p, q in pairs)
    rho_m = max(float(np.linalg.norm(p.means - q.means, axis=1).max()) for p, q in pairs)
    rho_S = max(float(np.sqrt(bures_squared(p.covariances, q.covariances)).max()) for p, q in pairs)
    rhs = 8 * R_m * rho_m + 8 * R_S * rho_S + 8 * (R_m ** 2 + R_S ** 2) * rho_w
    return lhs, rhs


def check_stability_bounds(instances, slack=1e-9):
    """Evaluate both bounds on every instance; counts violations beyond ``slack``."""
    rows = []
    for inst in instances:
        l1, r1 = one_sample_bound(inst.mu0, inst.mu0_hat)
        l2, r2 = two_sample_bound(inst)
        rows.append({"one_lhs": l1, "one_rhs": r1, "two_lhs": l2, "two_rhs": r2})
    viol1 = sum(r["one_lhs"] > r["one_rhs"] + slack for r in rows)
    viol2 = sum(r["two_lhs"] > r["two_rhs"] + slack for r in rows)
    return {"instances": rows, "one_sample_violations": viol1, "two_sample_violations": viol2}
