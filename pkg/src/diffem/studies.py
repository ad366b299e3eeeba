"""Parameter sweeps: Jacobian-method comparison and MW2 sample complexity.

Each (cell, repeat) pair draws its randomness from
``np.random.SeedSequence([seed, cell, repeat])``, so results do not depend on
the number of workers or on the order in which pairs are evaluated.
"""
import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from diffem import emdiff, gmm, io, ot
from diffem.errors import ArgumentError, DegenerateCovariance, SingularSystem

COMPARISON_FIELDS = ["gmm", "n", "K", "T", "repeat", "fixed_point_mse", "spectral_norm",
                     "relmse_os", "relmse_ai", "status"]
SUMMARY_METRICS = ["fixed_point_mse", "spectral_norm", "relmse_os", "relmse_ai"]


def default_workers():
    env = os.environ.get("DIFFEM_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _map(fn, jobs, workers):
    if workers is None:
        workers = default_workers()
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _rng(seed, cell, repeat):
    return np.random.default_rng(np.random.SeedSequence([seed, cell, repeat]))


def random_gmm(K, d, seed, mean_scale=4.0, cov_scale=1.0, min_eig=0.2):
    """Uniform weights, means in [-mean_scale, mean_scale]^d, random SPD covariances."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(-mean_scale, mean_scale, size=(K, d))
    covs = []
    for _ in range(K):
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        ev = rng.uniform(min_eig, 1.0, size=d)
        covs.append(cov_scale * (q * ev) @ q.T)
    covs = np.array(covs)
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    return gmm.GmmParams(np.full(K, 1.0 / K), means, covs)


def default_gmm_bank(d=3, K=3):
    """A well-separated mixture (small covariances) and an overlapping one."""
    return [random_gmm(K, d, seed=11, mean_scale=4.0, cov_scale=0.3),
            random_gmm(K, d, seed=12, mean_scale=1.5, cov_scale=1.0)]


def quantiles(values):
    """(median, q25, q75) ignoring NaNs; NaNs when nothing is finite."""
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan"), float("nan"), float("nan")
    q25, med, q75 = np.percentile(v, [25, 50, 75])
    return float(med), float(q25), float(q75)


# ----------------------------------------------------------------------------
# Jacobian-method comparison


@dataclass(frozen=True)
class ComparisonSweep:
    n: tuple = (200,)
    K: tuple = (3,)
    T: tuple = (5, 40)
    repeats: int = 20
    seed: int = 0
    em: gmm.EmConfig = gmm.EmConfig()

    def __post_init__(self):
        if not (self.n and self.K and self.T) or self.repeats < 1:
            raise ArgumentError("sweep grids must be nonempty and repeats >= 1")


def _comparison_job(job):
    gi, mu, n, K, T, rep, cell, seed, em = job
    rng = _rng(seed, cell, rep)
    row = {"gmm": gi, "n": n, "K": K, "T": T, "repeat": rep}
    nan = float("nan")
    try:
        x = gmm.sample_gmm(mu, n, rng)
        cfg = gmm.EmConfig(T, em.fix_weights, em.update_covariances, em.cov_regulariser, em.seed)
        theta0 = gmm.kmeanspp_init(x, K, int(rng.integers(2 ** 31)), em.cov_regulariser)
        traj = gmm.em_trajectory(theta0, x, cfg)
        ad = emdiff.jacobian_ad(theta0, x, cfg, diagnostics=False).jacobian
        os_ = emdiff.jacobian_os(traj[-2], x, cfg, diagnostics=False).jacobian
        row["fixed_point_mse"] = gmm.fixed_point_residual(traj[-1], x, cfg)
        row["spectral_norm"] = emdiff.spectral_norm(emdiff.dF_dtheta(traj[-1], x, cfg))
        row["relmse_os"] = emdiff.relative_mse(os_, ad)
        try:
            ai = emdiff.jacobian_ai(traj[-1], x, cfg, diagnostics=False).jacobian
            row["relmse_ai"] = emdiff.relative_mse(ai, ad)
            row["status"] = "ok"
        except SingularSystem:
            row["relmse_ai"] = nan
            row["status"] = "singular"
    except DegenerateCovariance:
        row.update(fixed_point_mse=nan, spectral_norm=nan, relmse_os=nan, relmse_ai=nan,
                   status="degenerate")
    return row


def run_gradient_comparison(sweep, gmm_bank=None, workers=1, output=None):
    """Compare AI and OS Jacobians against AD over an (n, K, T) grid.

    Returns ``(rows, summary)``: one row per (gmm, cell, repeat) and, per
    (gmm, cell), the median and interquartile range of every metric. With
    ``output`` (a directory) both are written as CSV.
    """
    bank = default_gmm_bank() if gmm_bank is None else list(gmm_bank)
    if not bank:
        raise ArgumentError("gmm_bank must be nonempty")
    jobs = []
    cells = list(itertools.product(range(len(bank)), sweep.n, sweep.K, sweep.T))
    for cell, (gi, n, K, T) in enumerate(cells):
        for rep in range(sweep.repeats):
            jobs.append((gi, bank[gi], n, K, T, rep, cell, sweep.seed, sweep.em))
    rows = _map(_comparison_job, jobs, workers)
    summary = summarise(rows, ["gmm", "n", "K", "T"], SUMMARY_METRICS)
    if output is not None:
        write_report(output, "comparison", rows, COMPARISON_FIELDS, summary)
    return rows, summary


def summarise(rows, keys, metrics):
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, rs in groups.items():
        entry = dict(zip(keys, key))
        entry["count"] = len(rs)
        entry["failures"] = sum(r.get("status", "ok") != "ok" for r in rs)
        for m in metrics:
            med, q25, q75 = quantiles([r[m] for r in rs])
            entry[f"{m}_median"], entry[f"{m}_q25"], entry[f"{m}_q75"] = med, q25, q75
        out.append(entry)
    return out


def write_report(directory, stem, rows, fields, summary):
    os.makedirs(directory, exist_ok=True)
    io.write_rows_csv(os.path.join(directory, f"{stem}.csv"), fields,
                      [[r[f] for f in fields] for r in rows])
    if summary:
        sfields = list(summary[0].keys())
        io.write_rows_csv(os.path.join(directory, f"{stem}_summary.csv"), sfields,
                          [[s[f] for f in sfields] for s in summary])


# ----------------------------------------------------------------------------
# sample complexity


SEPARATION_SCALES = {"low": 10.0, "medium": 0.5, "high": 0.1}
COMPLEXITY_FIELDS = ["separation", "sigma", "n", "repeat", "one_sample", "two_sample_rel", "status"]


def separation_pair(sigma, seed=3, K=3, d=2):
    """Fixed mixtures (mu, nu) whose covariances are scaled by ``sigma``."""
    mu = random_gmm(K, d, seed, mean_scale=3.0, cov_scale=sigma, min_eig=0.3)
    nu = random_gmm(K, d, seed + 1, mean_scale=3.0, cov_scale=sigma, min_eig=0.3)
    return mu, nu


def fit_em(x, K, iterations, seed, cov_regulariser=0.0):
    theta0 = gmm.kmeanspp_init(x, K, seed, cov_regulariser)
    cfg = gmm.EmConfig(iterations, cov_regulariser=cov_regulariser)
    return gmm.em_fit(theta0, x, cfg)[0]


def _complexity_job(job):
    label, sigma, mu, nu, n, rep, cell, seed, iterations, base = job
    rng = _rng(seed, cell, rep)
    row = {"separation": label, "sigma": sigma, "n": n, "repeat": rep}
    try:
        mu_hat = fit_em(gmm.sample_gmm(mu, n, rng), mu.n_components, iterations,
                        int(rng.integers(2 ** 31)))
        nu_hat = fit_em(gmm.sample_gmm(nu, n, rng), nu.n_components, iterations,
                        int(rng.integers(2 ** 31)))
        row["one_sample"] = ot.mw2_squared(mu_hat, mu)[0]
        row["two_sample_rel"] = abs(ot.mw2_squared(mu_hat, nu_hat)[0] - base) / base
        row["status"] = "ok"
    except DegenerateCovariance:
        row.update(one_sample=float("nan"), two_sample_rel=float("nan"), status="degenerate")
    return row


def run_sample_complexity(mu=None, nu=None, n_grid=(500, 1000, 2000, 5000), repeats=10,
                          separation_scales=None, iterations=200, seed=0, workers=1,
                          output=None):
    """One- and two-sample MW2 errors of EM estimates against n.

    With ``mu``/``nu`` given they are used as-is (one regime, label
    "given"); otherwise each separation regime builds its pair with
    :func:`separation_pair`. Returns ``(rows, summary)``; the summary holds
    medians, IQRs and the Spearman correlation of the median error with n.
    """
    if not n_grid or repeats < 1:
        raise ArgumentError("n_grid must be nonempty and repeats >= 1")
    if mu is not None or nu is not None:
        if mu is None or nu is None:
            raise ArgumentError("give both mu and nu or neither")
        regimes = [("given", float("nan"), mu, nu)]
    else:
        scales = SEPARATION_SCALES if separation_scales is None else separation_scales
        regimes = [(label, s) + separation_pair(s) for label, s in scales.items()]
    jobs = []
    cell = 0
    for label, sigma, m, v in regimes:
        base = ot.mw2_squared(m, v)[0]
        for n in n_grid:
            for rep in range(repeats):
                jobs.append((label, sigma, m, v, int(n), rep, cell, seed, iterations, base))
            cell += 1
    rows = _map(_complexity_job, jobs, workers)
    summary = summarise(rows, ["separation", "sigma", "n"], ["one_sample", "two_sample_rel"])
    for label, *_ in regimes:
        entries = [s for s in summary if s["separation"] == label]
        rho1 = spearman([s["n"] for s in entries], [s["one_sample_median"] for s in entries])
        rho2 = spearman([s["n"] for s in entries], [s["two_sample_rel_median"] for s in entries])
        for s in entries:
            s["spearman_one_sample"], s["spearman_two_sample"] = rho1, rho2
    if output is not None:
        write_report(output, "sample_complexity", rows, COMPLEXITY_FIELDS, summary)
    return rows, summary


def spearman(a, b):
    if len(a) < 2:
        return float("nan")
    return float(spearmanr(a, b).statistic)
