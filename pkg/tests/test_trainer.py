import math
from dataclasses import replace

import numpy as np
import pytest

from scpo.cmdp import Trajectory
from scpo.envs import make_env
from scpo.nn import NonFiniteError
from scpo.trainer import (
    METRIC_FIELDS,
    SCPO,
    ConfigError,
    NumericAbort,
    TrainConfig,
    collect,
    first_iteration_below,
    init_state,
    lagrangian_baseline,
    load_state,
    metrics_csv,
    power_k,
    qc_estimates,
    run_training,
    safety_targets,
    save_state,
    surrogate_loss,
    surrogate_loss_and_grad,
    train_iteration,
    transform_rewards,
    transform_rewards_array,
)

SMALL = dict(timesteps_T=500, batch_size=64, epochs_per_iter=2, hidden_sizes=(8, 8), n_iterations=3)


def small(**kw):
    return TrainConfig(**{**SMALL, **kw})


def traj(rewards, costs):
    n = len(rewards)
    return Trajectory(tuple(range(n)), (0,) * n, tuple(rewards), tuple(costs))


# ---- config ---------------------------------------------------------------

def test_config_validation_names_field():
    for kw, field in [({"gamma": 1.5}, "gamma"), ({"k": -1}, "k"), ({"k": 1.5}, "k"),
                      ({"estimator_choice": "L3"}, "estimator_choice"), ({"beta": -1.0}, "beta"),
                      ({"batch_size": 10**6}, "batch_size"), ({"mode": "x"}, "mode")]:
        with pytest.raises(ConfigError, match=field):
            TrainConfig(**kw)
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"lr": 1.0})


def test_config_round_trip_and_table():
    cfg = TrainConfig(k="inf", hidden_sizes=[4])
    assert math.isinf(cfg.k)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    run = TrainConfig.from_table("BallRun")
    assert (run.env, run.entropy_coef, run.reward_bias_b, run.k, run.beta) == ("point_run", 0.005, 1.0, 4, 0.5)
    assert TrainConfig.from_table("cart_safe").k == 5
    with pytest.raises(ConfigError):
        TrainConfig.from_table("nope")
    assert TrainConfig(mode="unconstrained", k=3, beta=2.0).effective().k == 0


# ---- reward transform -----------------------------------------------------

def test_power_k_conventions():
    np.testing.assert_array_equal(power_k([0.0, 0.5], 0), [1.0, 1.0])
    np.testing.assert_array_equal(power_k([0.5, 1.0], math.inf), [0.0, 1.0])
    assert power_k(0.5, 3) == 0.125


def test_transform_examples():
    t = traj([1.0, 2.0], [1.0, 0.0])
    cfg = TrainConfig(k=4, beta=3.0, reward_bias_b=0.5)
    np.testing.assert_allclose(transform_rewards(t, [1.0, 1.0], cfg), [1.5, 2.5])
    np.testing.assert_allclose(transform_rewards(t, [0.0, 0.0], cfg), [-3.0, 0.0])
    np.testing.assert_allclose(transform_rewards(t, [0.3, 0.0], replace(cfg, k=0)), [1.5, 2.5])
    q = 0.5
    want = 1.5 * q ** 4 - 3.0 * (1 - q ** 4) * 1.0
    assert transform_rewards(t, [q, 1.0], cfg)[0] == pytest.approx(want)


def test_transform_identity_when_surely_safe():
    rng = np.random.default_rng(0)
    r = rng.uniform(0, 1, 50)
    t = traj(r, rng.integers(0, 2, 50).astype(float))
    cfg = TrainConfig(k=4, beta=10.0, reward_bias_b=1.0)
    assert transform_rewards(t, np.ones(50), cfg).sum() == pytest.approx(r.sum() + 50 * 1.0, abs=1e-12)


def test_transform_errors():
    cfg = TrainConfig(reward_bias_b=0.0)
    with pytest.raises(ValueError, match="step"):
        transform_rewards(traj([0.0, -1.0], [0.0, 0.0]), [1.0, 1.0], cfg)
    with pytest.raises(ValueError):
        transform_rewards(traj([0.0], [0.0]), [1.5], cfg)
    with pytest.raises(ValueError):
        transform_rewards(traj([0.0], [0.0]), [1.0, 1.0], cfg)
    # masked-out padding is exempt
    out = transform_rewards_array([[1.0, -5.0]], [[0.0, 0.0]], [[1.0, 1.0]], cfg, mask=np.array([[True, False]]))
    assert out[0, 0] == 1.0


def test_lagrangian_transform():
    cfg = lagrangian_baseline(TrainConfig(beta=2.0, reward_bias_b=1.0))
    out = transform_rewards_array([0.5, 0.5], [1.0, 0.0], [0.0, 0.0], cfg)
    np.testing.assert_allclose(out, [-0.5, 1.5])


# ---- surrogate ------------------------------------------------------------

@pytest.mark.parametrize("est", ["L1", "L2"])
def test_surrogate_zero_at_old_policy(est):
    cfg = TrainConfig(estimator_choice=est, entropy_coef=0.0)
    lp = np.log([0.2, 0.5, 0.3])
    assert surrogate_loss(cfg, lp, lp, np.array([1.0, -2.0, 0.5])) == 0.0


def test_surrogate_clipping():
    cfg = TrainConfig(estimator_choice="L1", clip_epsilon=0.2, entropy_coef=0.0)
    old, new = np.zeros(1), np.log([1.5])
    loss, g = surrogate_loss_and_grad(cfg, old, new, np.array([2.0]))
    assert loss == pytest.approx(-0.2 * 2.0) and g[0] == 0.0
    loss, g = surrogate_loss_and_grad(cfg, old, new, np.array([-2.0]))
    assert loss == pytest.approx(0.5 * 2.0) and g[0] == pytest.approx(2.0 * 1.5)
    l2 = replace(cfg, estimator_choice="L2")
    assert surrogate_loss(l2, old, np.log([2.0]), np.array([-1.0])) == pytest.approx(0.5)
    assert surrogate_loss(replace(cfg, entropy_coef=0.1), old, old, np.ones(1), entropy=2.0) == pytest.approx(-0.2)
    with pytest.raises(NumericAbort):
        surrogate_loss(cfg, old, np.array([np.inf]), np.ones(1))


def test_l1_l2_gradients_agree_at_old_policy():
    rng = np.random.default_rng(4)
    lp, adv = np.log(rng.uniform(0.1, 1, 30)), rng.normal(size=30)
    _, g1 = surrogate_loss_and_grad(TrainConfig(estimator_choice="L1"), lp, lp, adv)
    _, g2 = surrogate_loss_and_grad(TrainConfig(estimator_choice="L2"), lp, lp, adv)
    np.testing.assert_allclose(g1, g2, atol=1e-12)
    np.testing.assert_allclose(g1, -adv / 30)


# ---- rollouts and targets -------------------------------------------------

def test_collect_shapes_and_cost_conservation():
    cfg = small(env="cart_safe")
    st = init_state(cfg)
    b = collect(st.env, st.agent, 6, np.random.default_rng(0), st.c0)
    H = st.env.horizon
    assert b.obs.shape == (6, H + 1, st.obs_dim)
    assert b.rewards.shape == b.costs.shape == b.log_probs.shape == (6, H)
    assert b.flags.shape == (6, H + 1)
    # a random cart policy topples the cart early
    assert b.done.any() and np.all(b.lengths[b.done] < H)
    # the only cost missing from the per-step column is that of the state entered last
    last = b.final_cost - (b.costs * b.mask).sum(axis=1)
    assert set(np.unique(last)) <= {0.0, 1.0}
    np.testing.assert_array_equal(b.rewards[~b.mask], 0.0)
    assert np.all(np.diff(b.flags, axis=1)[b.mask] <= 0)


def test_collect_cost_prefix_matches_final_without_termination():
    cfg = small(env="point_run")
    st = init_state(cfg)
    b = collect(st.env, st.agent, 4, np.random.default_rng(1), st.c0)
    assert not b.done.any()
    # costs hold c(s_t) for t < H; final_cost also counts the state entered by the last action
    last = b.final_cost - b.costs.sum(axis=1)
    assert set(np.unique(last)) <= {0.0, 1.0}


def test_safety_targets_and_qc_estimates():
    cfg = small(env="point_run")
    st = init_state(cfg)
    b = collect(st.env, st.agent, 3, np.random.default_rng(2), st.c0)
    b.flags[:] = 1.0
    np.testing.assert_array_equal(safety_targets(b, 0.9), 1.0)
    b.flags[0, 5:] = 0.0
    tg = safety_targets(b, 0.5)
    assert tg[0, 5] == 0.0 and tg[0, 4] == pytest.approx(0.5) and tg[0, 3] == pytest.approx(0.75)
    H = b.rewards.shape[1]
    q = qc_estimates(b, np.full((3, H), 0.8))
    assert q[1, 0] == pytest.approx(0.8) and q[1, H - 1] == 1.0
    assert q[0, 5] == 0.0 and q[0, 4] == pytest.approx(0.8)


# ---- training loop --------------------------------------------------------

def test_training_is_deterministic():
    cfg = small(env="point_run")
    _, h1 = run_training(cfg)
    _, h2 = run_training(cfg)
    assert metrics_csv(h1) == metrics_csv(h2)
    lines = metrics_csv(h1).splitlines()
    assert lines[0] == ",".join(METRIC_FIELDS) and len(lines) == 1 + cfg.n_iterations


def test_unconstrained_equals_scpo_with_k0():
    cfg = small(env="cart_safe", beta=3.0)
    _, a = run_training(replace(cfg, mode="unconstrained"))
    _, b = run_training(replace(cfg, mode="scpo", k=0, beta=0.0))
    _, c = run_training(replace(cfg, mode="lagrangian", beta=0.0))
    assert metrics_csv(a) == metrics_csv(b) == metrics_csv(c)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    cfg = small(env="point_run", n_iterations=2)
    st, _ = run_training(cfg, out_dir=str(tmp_path))
    back = load_state(tmp_path / "final_checkpoint.npz")
    assert back.cfg == cfg and back.iteration == 2 and back.env_steps == st.env_steps
    assert set(back.params) == set(st.params)
    for k in st.params:
        np.testing.assert_array_equal(back.params[k], st.params[k])
    for name in st.opt:
        assert back.opt[name].step == st.opt[name].step
        for k in st.opt[name].m:
            np.testing.assert_array_equal(back.opt[name].m[k], st.opt[name].m[k])
            np.testing.assert_array_equal(back.opt[name].v[k], st.opt[name].v[k])
    # a resumed run keeps training from the restored weights
    back, m = train_iteration(back)
    assert m.iteration == 3
    with pytest.raises(ValueError, match="trained on"):
        load_state(tmp_path / "final_checkpoint.npz", env=make_env("cart_safe"))


def test_periodic_checkpoints(tmp_path):
    run_training(small(env="cart_safe", checkpoint_every=2, n_iterations=4), out_dir=str(tmp_path))
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["checkpoint_00002.npz", "checkpoint_00004.npz", "final_checkpoint.npz", "metrics.csv"]


def test_nan_reward_aborts_with_dump(tmp_path, monkeypatch):
    env = make_env("point_run")
    monkeypatch.setattr(env, "reward", lambda s: np.full(len(s.t), np.nan))
    with pytest.raises((NumericAbort, NonFiniteError)):
        run_training(small(env="point_run"), out_dir=str(tmp_path), env=env)
    assert (tmp_path / "abort_checkpoint.npz").exists()


def test_first_iteration_below():
    _, h = run_training(small(env="cart_safe", n_iterations=2))
    assert first_iteration_below(h, math.inf) == 1
    assert first_iteration_below(h, -1.0) == math.inf


def test_gated_chain_learns_within_budget():
    cfg = TrainConfig(env="gated_chain", k=1, beta=1.0, reward_bias_b=0.0, entropy_coef=0.01,
                      timesteps_T=640, batch_size=64, learning_rate=2e-4, n_iterations=50, seed=0)
    _, h = run_training(cfg)
    assert np.mean([m.mean_cost for m in h[-10:]]) <= 5.0


# ---- estimator interface --------------------------------------------------

def test_estimator_api():
    est = SCPO(env="cart_safe", **{**SMALL, "n_iterations": 1})
    assert est.get_params()["k"] == 4
    with pytest.raises(Exception):
        est.predict(np.zeros((1, 6)))
    est.fit()
    X = np.zeros((3, 6))
    assert est.predict(X).shape == (3,)
    p = est.predict_proba(X)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    s = est.predict_safety(X)
    assert np.all((s >= 0) & (s <= 1))
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 4)))
    box = SCPO(env="point_run", **{**SMALL, "n_iterations": 1}).fit()
    assert box.predict(np.zeros((2, 5))).shape == (2, 2)
    with pytest.raises(AttributeError):
        box.predict_proba(np.zeros((2, 5)))


def test_lagrangian_beta_sweep_trades_return_for_cost():
    from scpo.cli import build_config, read_config_doc
    doc, _ = read_config_doc("point_run_lagrangian")
    final = {}
    for beta in (0.5, 5.0, 50.0):
        _, h = run_training(build_config(doc, beta=beta))
        final[beta] = (np.mean([m.mean_cost for m in h[-20:]]), np.mean([m.mean_return for m in h[-20:]]))
    costs = [final[b][0] for b in (0.5, 5.0, 50.0)]
    assert costs[0] > costs[1] > costs[2]
    assert costs[2] <= make_env("point_run").cost_limit
    # the two heavy penalties end at nearly the same return, so only the ends are ordered
    assert final[0.5][1] > final[50.0][1]
