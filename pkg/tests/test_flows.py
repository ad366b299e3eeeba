import numpy as np
import pytest

from diffem import flows, gmm, ot, studies
from diffem.errors import ArgumentError


@pytest.fixture(scope="module")
def toy():
    return flows.toy_flow_setup(seed=0, n=60)


def _cfg(method, steps=15, **kw):
    return flows.FlowConfig(grad_method=method, gd_steps=steps, learning_rate=3.0,
                            em=flows.TOY_FLOW_EM, **kw)


@pytest.mark.parametrize("method", ["AD", "AI", "OS", "WARM"])
def test_flow_decreases_energy(toy, method):
    tr = flows.run_flow(toy["x0"], toy["theta0"], toy["target"], _cfg(method))
    assert tr.final_energy < tr.energies[0]
    assert len(tr.energies) == 15
    assert tr.snapshot_steps == [0, 10, 15]


def test_flow_gradient_matches_fd(toy):
    loss = flows.mw2_loss([toy["target"]])
    cfg = gmm.EmConfig(3, fix_weights=True, cov_regulariser=0.01)
    x = toy["x0"][:12]
    theta0 = gmm.kmeanspp_init(x, 2, 0, 0.01)
    _, xbar, _ = flows.energy_and_grad(theta0, x, cfg, loss, "AD")
    h = 1e-6
    for i, a in [(0, 0), (5, 1), (11, 0)]:
        xp, xm = x.copy(), x.copy()
        xp[i, a] += h
        xm[i, a] -= h
        fd = (flows.energy(theta0, xp, cfg, loss) - flows.energy(theta0, xm, cfg, loss)) / (2 * h)
        assert xbar[i, a] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_flow_deterministic(toy):
    cfg = _cfg("AD", steps=5, subsample_ratio=0.5, seed=3)
    a = flows.run_flow(toy["x0"], toy["theta0"], toy["target"], cfg)
    b = flows.run_flow(toy["x0"], toy["theta0"], toy["target"], cfg)
    assert np.array_equal(a.final_points, b.final_points)
    assert a.energies == b.energies


def test_stochastic_flow_with_target_refits(toy):
    y = gmm.sample_gmm(toy["target"], 80, 1)
    cfg = _cfg("OS", steps=4, subsample_ratio=0.5, seed=1)
    tr = flows.run_flow(toy["x0"], toy["theta0"], toy["target"], cfg, target_points=y)
    assert np.all(np.isfinite(tr.final_points))


def test_adam_and_halving(toy):
    cfg = flows.FlowConfig(grad_method="AD", gd_steps=6, learning_rate=1e3,
                           em=flows.TOY_FLOW_EM, halve_on_increase=True)
    tr = flows.run_flow(toy["x0"], toy["theta0"], toy["target"], cfg)
    assert tr.learning_rates[-1] < 1e3
    assert np.all(np.diff(tr.energies) <= 1e-9)
    cfg = flows.FlowConfig(grad_method="AD", gd_steps=5, learning_rate=0.05,
                           em=flows.TOY_FLOW_EM, optimizer="adam")
    tr = flows.run_flow(toy["x0"], toy["theta0"], toy["target"], cfg)
    assert tr.final_energy < tr.energies[0]


def test_barycentre_flows():
    t = [studies.random_gmm(2, 2, 10 + i, mean_scale=2.0) for i in range(2)]
    x0 = gmm.sample_gmm(studies.random_gmm(2, 2, 5), 40, 0)
    theta0 = gmm.kmeanspp_init(x0, 2, 0, 0.01)
    cfg = flows.FlowConfig(gd_steps=5, learning_rate=2.0, em=flows.TOY_FLOW_EM)
    tr = flows.run_barycentre_flow(t, x0, theta0, cfg)
    assert tr.final_energy < tr.energies[0]
    with pytest.raises(ArgumentError):
        flows.run_barycentre_flow(t[:1], x0, theta0, cfg)
    t3 = [studies.random_gmm(2, 2, 20 + i, mean_scale=2.0) for i in range(3)]
    x3 = np.random.default_rng(0).standard_normal((40, 3))
    em = gmm.EmConfig(5, fix_weights=True, cov_regulariser=1e-3)
    tr = flows.run_projected_barycentre(t3, x3, flows.FlowConfig(gd_steps=5, learning_rate=2.0, em=em))
    assert tr.final_energy < tr.energies[0]
    with pytest.raises(ArgumentError):
        flows.run_projected_barycentre(t3, x3[:, :2], flows.FlowConfig(em=em))


def test_unbalanced_loss_runs(toy):
    loss = flows.mw2_loss([toy["target"]], unbalanced=ot.UnbalancedConfig())
    value, grad = loss(toy["theta0"])
    assert np.isfinite(value) and grad.shape == (toy["theta0"].n_params,)


def test_select_learning_rate(toy):
    loss = flows.mw2_loss([toy["target"]])
    lr = flows.select_learning_rate(toy["theta0"], toy["x0"], flows.TOY_FLOW_EM, loss, "AD", 1e6)
    assert lr < 1e6


def test_full_subsample_is_deterministic_flow(toy):
    a = flows.run_flow(toy["x0"], toy["theta0"], toy["target"], _cfg("AD", steps=4))
    b = flows.run_flow(toy["x0"], toy["theta0"], toy["target"], _cfg("AD", steps=4, subsample_ratio=1.0,
                                                                      seed=9))
    assert np.array_equal(a.final_points, b.final_points)


@pytest.mark.parametrize("method", ["AD", "WARM"])
def test_fixed_weights_conserved(toy, method):
    tr = flows.run_flow(toy["x0"], toy["theta0"], toy["target"], _cfg(method, steps=5))
    for w in tr.weight_snapshots:
        assert np.array_equal(w, toy["theta0"].weights)
