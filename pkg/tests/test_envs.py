import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scpo.envs import (
    REGISTRY,
    CartState,
    GatherState,
    PointState,
    TabularCmdpEnv,
    augment_observation,
    cart_safe_step,
    gather_grid_step,
    make_env,
    point_circle_step,
    point_run_step,
)
from scpo.toys import build_cancellation_cmdp


def point(pos, vel):
    return PointState(np.array([pos], dtype=float), np.array([vel], dtype=float))


def test_point_run_at_rest():
    _, r, c = point_run_step(point([0, 0], [0, 0]), [[0, 0]])
    assert r[0] == 0.0 and c[0] == 0.0


def test_point_run_speed_violation():
    env = make_env("point_run")
    assert env.cost(point([0, 0], [3.0, 0]))[0] == 1.0
    assert env.cost(point([0, 0], [2.4, 0]))[0] == 0.0
    assert env.cost(point([0, 5.0], [0, 0]))[0] == 1.0


def test_point_run_full_throttle_is_unsafe():
    # regression value from an independent scalar simulation of the same dynamics
    env = make_env("point_run")
    s, cum = point([0, 0], [0, 0]), 0.0
    for t in range(1, env.horizon + 1):
        s, _, c = point_run_step(s, [[1.0, 0.0]])
        cum += c[0]
        if cum > env.cost_limit:
            break
    assert t == 37


def test_point_run_action_clipped():
    a, _, _ = point_run_step(point([0, 0], [0, 0]), [[5.0, -7.0]])
    b, _, _ = point_run_step(point([0, 0], [0, 0]), [[1.0, -1.0]])
    np.testing.assert_array_equal(a.velocity, b.velocity)


def test_point_circle_reward_and_cost():
    env = make_env("point_circle")
    # radius 1 at (0, 1) moving in -x: tangential component v . (-y, x) = 0.5
    s = point([0.0, 1.0], [-0.5, 0.0])
    assert env.reward(s)[0] == pytest.approx(0.5)
    assert env.reward(point([0.3, 0.2], [0, 0]))[0] == 0.0
    x_lim = env.params.x_lim
    assert env.cost(point([x_lim, 0], [0, 0]))[0] == 1.0
    assert env.cost(point([-x_lim, 0], [0, 0]))[0] == 1.0
    assert env.cost(point([0.99 * x_lim, 0], [0, 0]))[0] == 0.0
    _, r, _ = point_circle_step(s, [[0, 0]])
    assert r[0] == pytest.approx(0.5)


@settings(max_examples=100)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-1, 1), st.floats(-1, 1))
def test_point_circle_reward_bounded_by_speed(x, y, vx, vy):
    env = make_env("point_circle")
    s = point([x, y], [vx, vy])
    assert abs(env.reward(s)[0]) <= np.hypot(vx, vy) * np.hypot(x, y) + 1e-12


def cart(x=0.0, theta=0.0):
    return CartState([x], [0.0], [theta], [0.0])


def test_cart_rewards_and_termination():
    env = make_env("cart_safe")
    assert env.reward(cart(theta=0.0))[0] == 2.0
    assert env.reward(cart(theta=np.pi))[0] == pytest.approx(0.0, abs=1e-15)
    _, r, _, done = cart_safe_step(cart(x=2.5), [1])
    assert r[0] == 2.0 and done[0]
    _, _, _, done = cart_safe_step(cart(x=0.0), [1])
    assert not done[0]


def test_cart_cost_band_and_literal_flag():
    assert make_env("cart_safe").cost(cart(x=1.5))[0] == 1.0
    assert make_env("cart_safe").cost(cart(x=0.2))[0] == 0.0
    literal = make_env("cart_safe", literal_cost=True)
    assert literal.cost(cart(x=0.2))[0] == 1.0 and literal.cost(cart(x=1.5))[0] == 0.0


def test_cart_step_limit():
    env = make_env("cart_safe")
    s = CartState([0.0], [0.0], [0.0], [0.0], np.array([env.params.max_steps - 1]))
    _, _, _, done = env.step(s, [0])
    assert done[0]


def gather(agent, blue=(), red=()):
    G = 7
    b = np.zeros((1, G, G), dtype=bool)
    r = np.zeros((1, G, G), dtype=bool)
    for i, j in blue:
        b[0, i, j] = True
    for i, j in red:
        r[0, i, j] = True
    return GatherState(np.array([agent]), b, r)


def test_gather_pickups():
    # move index 1 is +1 on the second coordinate
    s, r, c = gather_grid_step(gather([3, 3], blue=[(3, 4)]), [1])
    assert r[0] == 10.0 and c[0] == 0.0 and not s.blue.any()
    s, r, c = gather_grid_step(gather([3, 3], red=[(3, 4)]), [1])
    assert r[0] == 0.0 and c[0] == 1.0 and not s.red.any()
    assert c[0] > make_env("gather_grid").cost_limit
    _, r, c = gather_grid_step(gather([3, 3], blue=[(0, 0)], red=[(6, 6)]), [1])
    assert r[0] == 0.0 and c[0] == 0.0


def test_gather_walls():
    s, _, _ = gather_grid_step(gather([0, 6]), [1])
    np.testing.assert_array_equal(s.agent, [[0, 6]])


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_shapes_and_determinism(name):
    env = make_env(name)
    rng_a, rng_b = np.random.default_rng(3), np.random.default_rng(3)
    sa, sb = env.reset(5, rng_a), env.reset(5, rng_b)
    for t in range(10):
        act_rng = np.random.default_rng(t)
        if env.action_kind == "discrete":
            act = act_rng.integers(0, env.action_dim, 5)
        else:
            act = act_rng.uniform(-1, 1, (5, env.action_dim))
        sa, ra, ca, da = env.step(sa, act)
        sb, rb, cb, db = env.step(sb, act)
        np.testing.assert_array_equal(ra, rb)
        np.testing.assert_array_equal(ca, cb)
        assert set(np.unique(ca)) <= {0.0, 1.0}
        assert ra.shape == ca.shape == da.shape == (5,)
    obs = env.observe(sa)
    assert obs.shape == (5, env.obs_dim)
    assert np.all(np.isfinite(obs))
    aug = augment_observation(obs, np.full(5, 3.0), env.cost_limit)
    assert aug.shape == (5, env.obs_dim + 1)
    np.testing.assert_array_equal(augment_observation(obs, np.zeros(5), 1.0, augment=False), obs)


def test_random_policy_violates_point_run_budget():
    env = make_env("point_run")
    rng = np.random.default_rng(0)
    s = env.reset(200, rng)
    cum = env.cost(s)
    for _ in range(env.horizon):
        s, _, c, _ = env.step(s, rng.uniform(-1, 1, (200, 2)))
        cum = cum + c
    assert np.mean(cum > env.cost_limit) > 0.5


def test_tabular_env_and_registry_errors():
    env = make_env("cancellation")
    assert isinstance(env, TabularCmdpEnv)
    assert env.horizon == build_cancellation_cmdp().cmdp.horizon_T
    s = env.reset(4, np.random.default_rng(0))
    np.testing.assert_array_equal(env.observe(s).sum(axis=1), 1.0)
    with pytest.raises(KeyError):
        make_env("nope")
    with pytest.raises(ValueError):
        make_env("point_run", gravity=1.0)
    with pytest.raises(ValueError):
        make_env("cancellation", size=3)
