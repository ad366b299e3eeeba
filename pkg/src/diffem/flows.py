"""Gradient flows of EM-MW2 energies over point clouds.

The energy of a cloud X is L(theta_T(X)) where theta_T(X) runs T EM steps
from a fixed initialisation theta_0 and L is a sum of (U)MW2^2 losses to
fixed target mixtures. The data gradient comes from one of:

    AD    reverse accumulation through the whole EM trajectory (exact)
    AI    implicit solve at theta_T
    OS    last EM step only
    WARM  one EM step per descent step, warm-started from the previous theta
"""
import math
import time
from dataclasses import dataclass, field

import numpy as np

from diffem import emdiff, gmm, ot
from diffem.errors import ArgumentError, DegenerateCovariance

GRAD_METHODS = ("AD", "AI", "OS", "WARM")
DESCENT_SLACK = 1e-9


@dataclass(frozen=True)
class FlowConfig:
    grad_method: str = "AD"
    gd_steps: int = 100
    learning_rate: float = 1.0
    subsample_ratio: float = 1.0
    em: gmm.EmConfig = field(default_factory=lambda: gmm.EmConfig(iterations=10, fix_weights=True))
    seed: int = 0
    snapshot_every: int = 10
    halve_on_increase: bool = False
    optimizer: str = "gd"

    def __post_init__(self):
        if self.grad_method not in GRAD_METHODS:
            raise ArgumentError(f"grad_method must be one of {GRAD_METHODS}")
        if not 0 < self.subsample_ratio <= 1:
            raise ArgumentError("subsample_ratio must lie in (0, 1]")
        if not self.learning_rate > 0:
            raise ArgumentError("learning_rate must be positive")
        if self.gd_steps < 0 or self.snapshot_every < 1:
            raise ArgumentError("gd_steps must be >= 0 and snapshot_every >= 1")
        if self.optimizer not in ("gd", "adam"):
            raise ArgumentError("optimizer must be 'gd' or 'adam'")
        if self.grad_method != "WARM" and self.em.iterations < 1:
            raise ArgumentError("AD, AI and OS need at least one EM iteration")


@dataclass
class FlowTrace:
    energies: list = field(default_factory=list)
    point_snapshots: list = field(default_factory=list)
    snapshot_steps: list = field(default_factory=list)
    weight_snapshots: list = field(default_factory=list)
    learning_rates: list = field(default_factory=list)
    wall_time: float = 0.0
    final_points: np.ndarray = None
    final_theta: gmm.GmmParams = None
    final_energy: float = float("nan")

    def energy_rows(self):
        return [(t, e, lr) for t, (e, lr) in enumerate(zip(self.energies, self.learning_rates))]


# ----------------------------------------------------------------------------
# losses on theta


def mw2_loss(targets, projections=None, weights_grad=False, unbalanced=None):
    """Loss theta -> (sum_i MW2^2(P_i # theta, nu_i), flat gradient).

    ``projections`` is a list of (d_i x d) matrices with orthonormal rows
    (or None for identity). ``unbalanced`` switches to UMW2 with that config.
    """
    targets = list(targets)
    if projections is None:
        projections = [None] * len(targets)
    if len(projections) != len(targets):
        raise ArgumentError("one projection per target expected")

    def loss(theta):
        K, d = theta.n_components, theta.dim
        total = 0.0
        gw = np.zeros(K)
        gm = np.zeros((K, d))
        gS = np.zeros((K, d, d))
        for nu, A in zip(targets, projections):
            mu = theta if A is None else ot.project_gmm(theta, A)
            if unbalanced is not None:
                g = ot.umw2_grad_params(mu, nu, unbalanced)
            else:
                g = ot.mw2_grad_params(mu, nu, weights=weights_grad)
            total += g.value
            gw += g.weights
            if A is None:
                gm += g.means
                gS += g.covariances
            else:
                gm += g.means @ A
                gS += np.einsum("ia,kij,jb->kab", A, g.covariances, A)
        return total, np.concatenate([gw, gm.ravel(), gS.ravel()])

    return loss


def energy_and_grad(theta0, x, em_cfg, loss, method):
    """(energy, x_bar, theta_T) for the energy X -> loss(theta_T(X))."""
    x = gmm.as_points(x)
    traj = gmm.em_trajectory(theta0, x, em_cfg)
    theta_T = traj[-1]
    value, gbar = loss(theta_T)
    if method == "AD":
        lam = gbar
        xbar = np.zeros_like(x)
        for theta in reversed(traj[:-1]):
            lam, xb = emdiff.vjp(theta, x, em_cfg, lam)
            xbar += xb
    elif method == "AI":
        xbar = emdiff.ai_vjp(theta_T, x, em_cfg, gbar)
    elif method == "OS":
        _, xbar = emdiff.vjp(traj[-2], x, em_cfg, gbar)
    else:
        raise ArgumentError(f"unknown gradient method {method!r}")
    return value, xbar, theta_T


def energy(theta0, x, em_cfg, loss):
    theta_T = gmm.em_trajectory(theta0, x, em_cfg)[-1]
    return loss(theta_T)[0]


# ----------------------------------------------------------------------------
# the flow driver


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def direction(self, g):
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return mh / (np.sqrt(vh) + self.eps)


def _subsample(rng, n, ratio):
    k = math.ceil(ratio * n)
    return np.sort(rng.choice(n, size=k, replace=False))


def _refit_targets(targets, target_points, em_cfg, rng, ratio):
    fitted = []
    for nu, y in zip(targets, target_points):
        idx = _subsample(rng, y.shape[0], ratio)
        fitted.append(gmm.em_trajectory(nu, y[idx], em_cfg)[-1])
    return fitted


def run_flow_loss(x0, theta0, loss, cfg, loss_factory=None, target_points=None, targets=None,
                  clip=None):
    """Generic flow on a loss over theta; see :func:`run_flow`.

    ``loss_factory(targets)`` rebuilds the loss when targets are refitted on
    subsamples of ``target_points`` (stochastic flows). ``clip`` is an
    optional (lo, hi) box the points are projected back into after each step.
    """
    start = time.perf_counter()
    x = np.array(gmm.as_points(x0), dtype=np.float64, copy=True)
    n = x.shape[0]
    rng = np.random.default_rng(cfg.seed)
    stochastic = cfg.subsample_ratio < 1.0
    trace = FlowTrace()
    lr = cfg.learning_rate
    adam = _Adam(lr) if cfg.optimizer == "adam" else None
    theta_warm = theta0

    def step_direction(g):
        return adam.direction(g) if adam is not None else g

    def project(z):
        return z if clip is None else np.clip(z, clip[0], clip[1])

    current = None  # cached (energy, grad, theta) at x for the deterministic path
    for t in range(cfg.gd_steps):
        if t % cfg.snapshot_every == 0:
            trace.point_snapshots.append(x.copy())
            trace.snapshot_steps.append(t)
        step_loss = loss
        if stochastic and target_points is not None:
            step_loss = loss_factory(_refit_targets(targets, target_points, cfg.em, rng,
                                                    cfg.subsample_ratio))
        if cfg.grad_method == "WARM":
            theta_warm, value, xbar = emdiff.warm_start_loss_step(theta_warm, x, step_loss, cfg.em)
            trace.energies.append(value)
            trace.weight_snapshots.append(theta_warm.weights.copy())
            trace.learning_rates.append(lr)
            x = project(x - lr * step_direction(xbar))
            continue
        if stochastic:
            idx = _subsample(rng, n, cfg.subsample_ratio)
            value, xb, theta_T = energy_and_grad(theta0, x[idx], cfg.em, step_loss, cfg.grad_method)
            xbar = np.zeros_like(x)
            xbar[idx] = xb
            trace.energies.append(value)
            trace.weight_snapshots.append(theta_T.weights.copy())
            trace.learning_rates.append(lr)
            x = project(x - lr * step_direction(xbar))
            continue
        if current is None:
            current = energy_and_grad(theta0, x, cfg.em, loss, cfg.grad_method)
        value, xbar, theta_T = current
        trace.energies.append(value)
        trace.weight_snapshots.append(theta_T.weights.copy())
        direction = step_direction(xbar)
        while True:
            x_new = project(x - lr * direction)
            nxt = energy_and_grad(theta0, x_new, cfg.em, loss, cfg.grad_method)
            if not cfg.halve_on_increase or nxt[0] <= value + DESCENT_SLACK or lr < 1e-300:
                break
            lr *= 0.5
        trace.learning_rates.append(lr)
        x, current = x_new, nxt

    trace.final_points = x
    if cfg.grad_method == "WARM":
        # the warm-start energy: loss after one more EM step from the carried state
        trace.final_theta = gmm.m_step(theta_warm, x, cfg.em)
        trace.final_energy = loss(trace.final_theta)[0]
    else:
        trace.final_theta = gmm.em_trajectory(theta0, x, cfg.em)[-1]
        trace.final_energy = loss(trace.final_theta)[0]
    trace.point_snapshots.append(x.copy())
    trace.snapshot_steps.append(cfg.gd_steps)
    trace.wall_time = time.perf_counter() - start
    return trace


def run_flow(x0, theta0, target, cfg, target_points=None, weights_grad=None):
    """Gradient descent of X -> MW2^2(theta_T(X), target).

    With ``subsample_ratio < 1`` each step fits EM on a fresh uniform
    subsample of ceil(r n) points; if ``target_points`` is given the target
    mixture is also refitted each step on a subsample of those points,
    starting from ``target``. The weight gradient (through the transport
    duals) is used when weights are learned, i.e. unless ``fix_weights``.
    """
    if weights_grad is None:
        weights_grad = not cfg.em.fix_weights
    factory = lambda tg: mw2_loss(tg, weights_grad=weights_grad)
    tp = None if target_points is None else [gmm.as_points(target_points)]
    return run_flow_loss(x0, theta0, factory([target]), cfg, factory, tp, [target])


def run_weight_pathology(nu_weights, uniform, x0=None, theta0=None, target=None, cfg=None, seed=0):
    """Standard-EM flow (weights learned) between 3-component mixtures.

    With ``uniform`` the source and target weights are uniform; otherwise the
    source uses (1/5, 1/5, 3/5) and the target ``nu_weights``. Returns the
    trace; ``trace.weight_error`` is ||w_final - w_target||_1.
    """
    setup = weight_pathology_setup(nu_weights, uniform, seed)
    x0 = setup["x0"] if x0 is None else x0
    theta0 = setup["theta0"] if theta0 is None else theta0
    target = setup["target"] if target is None else target
    if cfg is None:
        cfg = FlowConfig(grad_method="AD", gd_steps=300, learning_rate=0.1 * len(x0),
                         em=gmm.EmConfig(iterations=10, cov_regulariser=1e-4), seed=seed,
                         halve_on_increase=True)
    trace = run_flow(x0, theta0, target, cfg, weights_grad=True)
    trace.weight_error = float(np.abs(trace.final_theta.weights - target.weights).sum())
    return trace


def weight_pathology_setup(nu_weights, uniform, seed=0, n=200):
    """Source cloud, EM initialisation and target for the weight study."""
    means0 = np.array([[-4.0, 0.0], [0.0, 4.0], [4.0, 0.0]])
    means1 = np.array([[-4.0, -6.0], [0.0, -2.0], [4.0, -6.0]])
    cov = 0.3 * np.eye(2)
    if uniform:
        w0 = w1 = np.full(3, 1.0 / 3)
    else:
        w0 = np.array([0.2, 0.2, 0.6])
        w1 = np.asarray(nu_weights, dtype=np.float64)
    mu0 = gmm.GmmParams(w0, means0, np.repeat(cov[None], 3, 0))
    nu = gmm.GmmParams(w1, means1, np.repeat(cov[None], 3, 0))
    rng = np.random.default_rng(seed)
    counts = np.round(w0 * n).astype(int)
    counts[-1] = n - counts[:-1].sum()
    x0 = np.concatenate([means0[k] + rng.standard_normal((c, 2)) @ np.linalg.cholesky(cov).T
                         for k, c in enumerate(counts)])
    return {"x0": x0, "theta0": mu0, "target": nu}


def run_barycentre_flow(targets, x0, theta0, cfg):
    """Descend X -> sum_i MW2^2(theta_T(X), nu_i)."""
    targets = list(targets)
    if len(targets) < 2:
        raise ArgumentError("a barycentre needs at least two targets")
    loss = mw2_loss(targets, weights_grad=not cfg.em.fix_weights)
    return run_flow_loss(x0, theta0, loss, cfg)


def run_projected_barycentre(targets_2d, x0, cfg, theta0=None, drops=(0, 1, 2)):
    """Descend X (n x 3) -> sum_i MW2^2(P_i # theta_T(X), nu_i).

    P_i drops coordinate ``drops[i]``; ``theta0`` defaults to k-means++ on x0
    with the target component count.
    """
    targets_2d = list(targets_2d)
    x0 = gmm.as_points(x0)
    if x0.shape[1] != 3 or len(targets_2d) != len(drops):
        raise ArgumentError("expected a 3-D cloud and one 2-D target per dropped axis")
    projections = [ot.coordinate_projection(3, [a for a in range(3) if a != k]) for k in drops]
    if theta0 is None:
        theta0 = gmm.kmeanspp_init(x0, targets_2d[0].n_components, cfg.seed, cfg.em.cov_regulariser)
    loss = mw2_loss(targets_2d, projections, weights_grad=not cfg.em.fix_weights)
    return run_flow_loss(x0, theta0, loss, cfg)


def select_learning_rate(theta0, x, em_cfg, loss, method, lr0, max_halvings=40):
    """Largest lr0 / 2^k whose first step decreases the energy."""
    value, xbar, _ = energy_and_grad(theta0, x, em_cfg, loss, method)
    lr = lr0
    for _ in range(max_halvings):
        try:
            if energy(theta0, gmm.as_points(x) - lr * xbar, em_cfg, loss) < value:
                return lr
        except DegenerateCovariance:
            pass  # the trial step collapsed a component: too long
        lr *= 0.5
    return lr


# ----------------------------------------------------------------------------
# toy problem used by the flow experiments


TOY_FLOW_EM = gmm.EmConfig(iterations=10, fix_weights=True, cov_regulariser=0.01)


def toy_flow_setup(seed=0, n=200):
    """2-D source cloud (3 components), EM initialisation, target and flow settings.

    The target has one thin axis per component (variance below the covariance
    regulariser), so the reachable energy has a positive floor and ratios
    between gradient methods stay meaningful.
    """
    rng = np.random.default_rng(seed)
    src = gmm.GmmParams(np.full(3, 1.0 / 3),
                        0.3 * np.array([[-1.0, 0.0], [0.0, 0.8], [1.0, 0.0]]),
                        np.array([0.15 * np.eye(2)] * 3))
    thin = 0.007
    tgt = gmm.GmmParams(np.full(3, 1.0 / 3),
                        np.array([[-0.6, -2.0], [0.0, -1.6], [0.6, -2.0]]),
                        np.array([[[0.2, 0.0], [0.0, thin]], [[thin, 0.0], [0.0, 0.2]],
                                  [[0.2, 0.0], [0.0, thin]]]))
    x0 = gmm.sample_gmm(src, n, rng)
    cfg = FlowConfig(grad_method="AD", gd_steps=500, learning_rate=10.0, em=TOY_FLOW_EM)
    return {"x0": x0, "theta0": src, "target": tgt, "config": cfg}
