import numpy as np
import pytest
from scipy import integrate

from karma_pricing.env import Population, RoutingEnv
from karma_pricing.gp import GaussianBelief, TransitionDataset, build_model, fit
from karma_pricing.learner import (ChangeEvent, EpisodeLog, LearnerConfig, PolicyObjective,
                                   evaluate_policy, expected_cost, improve_policy,
                                   policy_gradient, run_episode, saturated_cost)
from karma_pricing.network import NetworkConfig, societal_cost
from karma_pricing.policy import PolicyParams, evaluate, squash

X_STAR = np.array([0.4, 0.35])


def cfg2(**kw):
    return LearnerConfig.for_flows(X_STAR, **kw)


@pytest.fixture(scope="module")
def surrogate():
    """GP fitted to a smooth two-arc system where prices pull the flows."""
    rng = np.random.default_rng(0)
    N = 60
    S = np.column_stack([rng.uniform(0.1, 0.7, (N, 2)), rng.uniform(40, 60, N),
                         rng.uniform(5, 15, N)])
    U = rng.uniform(-20, 20, (N, 2))
    target = 0.3 + 0.01 * U
    D = np.column_stack([0.5 * (target - S[:, :2]) + 0.005 * rng.normal(size=(N, 2)),
                         0.1 * rng.normal(size=N), 0.05 * rng.normal(size=N)])
    return fit(TransitionDataset(np.hstack([S, U]), D), rng, restarts=2)


def zero_model(noise=1e-10):
    rng = np.random.default_rng(1)
    X = np.column_stack([rng.uniform(0, 1, (20, 2)), rng.uniform(40, 60, 20),
                         rng.uniform(5, 15, 20), rng.uniform(-20, 20, (20, 2))])
    return build_model(TransitionDataset(X, np.zeros((20, 4))), np.zeros((4, 6)),
                       np.log([1e-12] * 4), np.log([noise] * 4))


def test_config_shape_and_validation():
    cfg = cfg2()
    np.testing.assert_array_equal(cfg.w, [1, 1, 0, 0])
    assert cfg.active == (0, 1)
    np.testing.assert_array_equal(cfg.retarget([0.5, 0.4]).s_star[:2], [0.5, 0.4])
    with pytest.raises(ValueError):
        LearnerConfig(np.zeros(3), np.array([1, 0.5, 0]))
    with pytest.raises(ValueError):
        cfg2(H=0)
    with pytest.raises(ValueError):
        cfg2(sigma_c=0.0)


def test_saturated_cost_examples():
    cfg = cfg2()
    assert saturated_cost(cfg.s_star, cfg) == 0.0
    assert saturated_cost(np.r_[X_STAR, 12.0, 99.0], cfg) == 0.0
    assert saturated_cost(np.r_[X_STAR + 100, 0, 0], cfg) == pytest.approx(1.0)
    s = np.r_[X_STAR + [0.1, 0.0], 0, 0]
    assert saturated_cost(s, cfg) == pytest.approx(1 - np.exp(-0.5))


def test_expected_cost_deterministic_limit():
    cfg = cfg2(sigma_c=0.2)
    mu = np.array([0.3, 0.5, 40.0, 9.0])
    assert expected_cost(GaussianBelief(mu, np.zeros((4, 4))), cfg) == pytest.approx(
        saturated_cost(mu, cfg), abs=1e-14)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_expected_cost_at_target(m):
    x_star = np.linspace(0.2, 0.3, m)
    cfg = LearnerConfig.for_flows(x_star, sigma_c=0.15)
    cov = np.diag(np.r_[np.full(m, 0.15**2), 30.0, 4.0])
    val = expected_cost(GaussianBelief(cfg.s_star + np.r_[np.zeros(m), 50, 10], cov), cfg)
    assert val == pytest.approx(1 - 2 ** (-m / 2), abs=1e-12)
    # the same number by 1-D quadrature when m = 1
    if m == 1:
        s = 0.15
        f = lambda x: (1 - np.exp(-0.5 * x**2 / s**2)) * np.exp(-0.5 * x**2 / s**2) / (
            s * np.sqrt(2 * np.pi))
        assert integrate.quad(f, -20 * s, 20 * s, epsabs=1e-13)[0] == pytest.approx(val, abs=1e-10)


def test_expected_cost_monte_carlo():
    rng = np.random.default_rng(2)
    cfg = cfg2(sigma_c=0.1)
    L = rng.normal(size=(4, 4)) * [0.1, 0.1, 5, 2]
    belief = GaussianBelief(np.array([0.45, 0.3, 50, 10]), L @ L.T)
    val = expected_cost(belief, cfg)
    N = 10**6
    s = rng.multivariate_normal(belief.mean, belief.cov, size=N)
    c = 1 - np.exp(-0.5 * np.sum((s[:, :2] - X_STAR) ** 2, 1) / 0.01)
    assert abs(val - c.mean()) < 3 * c.std() / np.sqrt(N)


def test_expected_cost_ignores_karma_statistics():
    rng = np.random.default_rng(3)
    cfg = cfg2()
    L = rng.normal(size=(4, 4))
    cov = L @ L.T
    base = expected_cost(GaussianBelief(np.array([0.3, 0.4, 50, 10]), cov), cfg)
    cov2 = cov.copy()
    cov2[2:, :] *= 3
    cov2[:, 2:] *= 3
    other = expected_cost(GaussianBelief(np.array([0.3, 0.4, -7, 99]), cov2), cfg)
    assert base == other
    assert 0 <= base <= 1


def test_evaluate_policy_limits():
    model = zero_model()
    params = PolicyParams.zeros(2, 20.0)
    cfg = cfg2(H=6)
    at_target = GaussianBelief(np.r_[X_STAR, 50, 10], 1e-12 * np.eye(4))
    assert evaluate_policy(model, params, at_target, cfg) == pytest.approx(0.0, abs=1e-6)
    far = GaussianBelief(np.r_[X_STAR + 5, 50, 10], 1e-12 * np.eye(4))
    assert evaluate_policy(model, params, far, cfg) == pytest.approx(7.0, abs=1e-6)


def test_evaluate_policy_monte_carlo(surrogate):
    cfg = cfg2(H=5, sigma_c=0.1)
    params = PolicyParams(np.zeros((2, 4)), np.array([0.3, 0.1]), 20.0)
    belief = GaussianBelief(np.array([0.6, 0.2, 50, 10]), 1e-4 * np.eye(4))
    J = evaluate_policy(surrogate, params, belief, cfg)

    rng = np.random.default_rng(4)
    N = 10**4
    s = rng.multivariate_normal(belief.mean, belief.cov, size=N)
    total = np.mean(1 - np.exp(-0.5 * np.sum((s[:, :2] - X_STAR) ** 2, 1) / 0.01))
    m = surrogate
    for _ in range(cfg.H):
        a = params.amplitude * squash(s @ params.A.T + params.b)
        Z = (np.hstack([s, a]) - m.x_mean) / m.x_scale
        delta = np.empty((N, 4))
        for e in range(4):
            ell = np.exp(m.log_ell[e])
            k = np.exp(m.log_sf2[e]) * np.exp(
                -0.5 * (((Z[:, None] - m.X[None]) / ell) ** 2).sum(-1))
            mean = k @ m.beta[e]
            var = np.exp(m.log_sf2[e]) + np.exp(m.log_sn2[e]) - np.einsum(
                "ij,jk,ik->i", k, m.iK[e], k)
            delta[:, e] = (mean + np.sqrt(np.maximum(var, 0)) * rng.normal(size=N)) * m.y_scale[e]
        s = s + delta
        total += np.mean(1 - np.exp(-0.5 * np.sum((s[:, :2] - X_STAR) ** 2, 1) / 0.01))
    assert J == pytest.approx(total, rel=0.05)


def test_gradient_matches_finite_differences(surrogate):
    rng = np.random.default_rng(5)
    cfg = cfg2(H=4, sigma_c=0.2)
    for _ in range(3):
        params = PolicyParams(rng.normal(size=(2, 4)) * 0.2 / surrogate.x_scale[:4],
                              rng.normal(size=2) * 0.3, 20.0)
        belief = GaussianBelief(np.array([0.5, 0.3, 50, 10]), 1e-4 * np.eye(4))
        obj = PolicyObjective(surrogate, params, belief, cfg)
        th = obj.to_theta(params)
        _, g = obj.value_and_grad(th)
        h = 1e-5
        fd = np.array([(obj.value(th + h * e) - obj.value(th - h * e)) / (2 * h)
                       for e in np.eye(th.size)])
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-3
        # the unscaled gradient is the chain-rule image of the scaled one
        raw = policy_gradient(surrogate, params, belief, cfg)
        np.testing.assert_allclose(raw.A, g[:8].reshape(2, 4) * obj.scale[None, :], rtol=1e-8,
                                   atol=1e-12)


def test_improve_policy_descends_then_stays(surrogate):
    rng = np.random.default_rng(6)
    cfg = cfg2(H=5, sigma_c=0.15, policy_restarts=2, policy_maxiter=100)
    belief = GaussianBelief(np.array([0.6, 0.2, 50, 10]), 1e-4 * np.eye(4))
    start = PolicyParams(rng.normal(size=(2, 4)) * 0.01, rng.normal(size=2), 20.0)
    first = improve_policy(surrogate, start, belief, cfg, rng)
    assert first.J_after < first.J_before
    assert first.J_before == pytest.approx(evaluate_policy(surrogate, start, belief, cfg))
    second = improve_policy(surrogate, first.params, belief, cfg, rng)
    assert second.J_after <= second.J_before + 1e-9
    assert abs(second.J_after - first.J_after) < 1e-6 or second.J_after < first.J_after


def test_improve_policy_never_regresses(surrogate):
    rng = np.random.default_rng(7)
    cfg = cfg2(H=3, policy_restarts=2, policy_maxiter=3)
    belief = GaussianBelief(np.array([0.5, 0.3, 50, 10]), 1e-4 * np.eye(4))
    for _ in range(3):
        params = PolicyParams(rng.normal(size=(2, 4)), rng.normal(size=2), 20.0)
        upd = improve_policy(surrogate, params, belief, cfg, rng)
        assert upd.J_after <= upd.J_before + 1e-9
        assert evaluate_policy(surrogate, upd.params, belief, cfg) == pytest.approx(
            upd.J_after, abs=1e-9)


def test_episode_log_helpers():
    log = EpisodeLog(n=1)
    for t, c in enumerate([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], start=1):
        log.t.append(t)
        log.cost.append(c)
        log.x.append(np.array([0.1 * t]))
        log.K_mean.append(50.0)
        log.K_std.append(1.0)
        log.raw_prices.append(np.array([float(t)]))
    ma = log.cost_ma5
    assert np.isnan(ma[:4]).all()
    np.testing.assert_allclose(ma[4:], [3.0, 4.0])
    ds = log.dataset()
    assert len(ds) == 5
    np.testing.assert_allclose(ds.inputs[0], [0.1, 50.0, 1.0, 2.0])
    np.testing.assert_allclose(ds.targets[0], [0.1, 0.0, 0.0])


CHEAP = dict(H=2, policy_restarts=1, policy_maxiter=3, gp_restarts=1, gp_maxiter=10)


def small_env(seed, cfg=None, M=60):
    rng = np.random.default_rng(seed)
    cfg = cfg or NetworkConfig((1.0, 2.0), (1 / 3, 2 / 3))
    return RoutingEnv(cfg, Population.sample(M, rng), rng), rng


def test_run_episode_update_schedule(tmp_path):
    env, rng = small_env(0)
    lc = LearnerConfig.for_flows([0.41, 0.54], t_init=10, t_update=5, **CHEAP)
    log = run_episode(env, lc, rng, 100, checkpoint_dir=tmp_path)
    assert len(log) == 100 and log.t == list(range(1, 101))
    assert [u["day"] for u in log.updates] == list(range(10, 100, 5))
    assert len(log.updates) == 18
    assert all(u["n_data"] == u["day"] - 1 for u in log.updates)
    assert len(log.dataset()) == 99
    assert len(list(tmp_path.glob("gp_day*.npz"))) == 18
    # the pseudo-random phase keeps the comfort ordering; later days follow the policy
    for raw in log.raw_prices[:10]:
        assert raw[0] >= raw[1]
    cfg = env.config
    for t in range(len(log)):
        assert log.cost[t] == pytest.approx(societal_cost(cfg, log.x[t]))
        assert np.all(np.abs(log.raw_prices[t]) <= 20.0 + 1e-12)
        assert log.prices[t][0] >= 0 and log.prices[t][1] <= 0


def test_change_event_leaves_learner_alone(tmp_path):
    before = NetworkConfig((1.0, 2.0), (1 / 3, 2 / 3))
    after = before.with_changes(kappa=(1 / 2, 2 / 3))
    env, rng = small_env(1, before)
    lc = LearnerConfig.for_flows([0.41, 0.54], t_init=10, t_update=5, **CHEAP)
    log = run_episode(env, lc, rng, 30, [ChangeEvent(22, after, np.array([0.56, 0.39]))],
                      checkpoint_dir=tmp_path)
    assert env.config == after
    assert log.cost[21] == pytest.approx(societal_cost(before, log.x[21]))
    assert log.cost[22] == pytest.approx(societal_cost(after, log.x[22]))
    # the price on the first changed day comes from the policy fitted on day 20
    pol = np.load(tmp_path / "policy_day020.npz")
    params = PolicyParams(pol["A"], pol["b"], float(pol["amplitude"]))
    prev = np.r_[log.x[21], log.K_mean[21], log.K_std[21]]
    np.testing.assert_allclose(log.raw_prices[22], evaluate(params, prev))
    data = np.load(tmp_path / "data_day025.npz")
    assert len(data["inputs"]) == 24


def test_run_episode_is_deterministic():
    logs = []
    for _ in range(2):
        env, rng = small_env(2)
        lc = LearnerConfig.for_flows([0.41, 0.54], t_init=6, t_update=4, **CHEAP)
        logs.append(run_episode(env, lc, rng, 16))
    np.testing.assert_array_equal(np.array(logs[0].x), np.array(logs[1].x))
    np.testing.assert_array_equal(np.array(logs[0].prices), np.array(logs[1].prices))
    np.testing.assert_array_equal(logs[0].K_std, logs[1].K_std)


def test_zero_day_episode():
    env, rng = small_env(3)
    log = run_episode(env, LearnerConfig.for_flows([0.41, 0.54]), rng, 0)
    assert len(log) == 0 and log.updates == []
