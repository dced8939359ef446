"""Batched desk-scale constrained environments.

Every environment steps ``n`` independent copies at once. ``step`` returns
``(state, reward, cost, done)`` where ``reward`` belongs to the state the
action was taken in and ``cost`` to the state that was entered, so the
cumulative cost of a trajectory is the reset state's ``cost`` plus the sum
of entered-state costs. ``done`` marks early termination only; the trainer
enforces the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .cmdp import DEFAULT_DELTA, budget_q_clip


def augment_observation(base, q, c0: float, delta: float = DEFAULT_DELTA, augment: bool = True) -> np.ndarray:
    """Append ``q_clip`` of the raw cumulative cost ``q`` to base features.

    With ``augment=False`` the base features are returned unchanged.
    """
    base = np.asarray(base, dtype=float)
    if not augment:
        return base
    qc = np.asarray(budget_q_clip(q, c0, delta), dtype=float)
    return np.concatenate([base, qc.reshape(base.shape[:-1] + (1,))], axis=-1)


# --------------------------------------------------------------------------
# Point mass
# --------------------------------------------------------------------------

@dataclass
class PointState:
    position: np.ndarray  # (n, 2)
    velocity: np.ndarray  # (n, 2)
    t: np.ndarray = None

    def __post_init__(self):
        self.position = np.atleast_2d(np.asarray(self.position, dtype=float))
        self.velocity = np.atleast_2d(np.asarray(self.velocity, dtype=float))
        if self.t is None:
            self.t = np.zeros(len(self.position), dtype=int)


@dataclass(frozen=True)
class PointParams:
    accel: float = 0.35
    damping: float = 0.1
    v_max: float = 4.0
    dt: float = 1.0
    speed_limit: float = 2.5
    y_lim: float = 4.0
    r_circle: float = 1.0
    x_lim: float = 0.8
    circle_accel: float = 0.1
    circle_v_max: float = 1.0
    init_noise: float = 0.1


def _point_dynamics(state: PointState, action, accel, damping, v_max, dt) -> PointState:
    a = np.clip(np.atleast_2d(np.asarray(action, dtype=float)), -1.0, 1.0)
    v = (1.0 - damping) * state.velocity + accel * a
    speed = np.linalg.norm(v, axis=1, keepdims=True)
    v = np.where(speed > v_max, v * (v_max / np.maximum(speed, 1e-300)), v)
    return PointState(state.position + dt * v, v, state.t + 1)


class BatchEnv:
    name = "base"
    horizon = 250
    cost_limit = 25.0
    obs_dim = 0
    action_kind = "box"
    action_dim = 2

    def __init__(self, **overrides):
        valid = {f.name for f in fields(self.params_cls)}
        unknown = set(overrides) - valid
        if unknown:
            raise ValueError(f"unknown {self.name} parameters: {sorted(unknown)}")
        self.params = replace(self.params_cls(), **overrides)

    def spec(self) -> dict:
        return {"name": self.name, "horizon": self.horizon, "cost_limit": self.cost_limit,
                "obs_dim": self.obs_dim, "action_kind": self.action_kind, "action_dim": self.action_dim}


class PointRun(BatchEnv):
    """Run along +x without exceeding the speed threshold or leaving a lateral corridor."""

    name = "point_run"
    params_cls = PointParams
    horizon = 250
    cost_limit = 25.0
    obs_dim = 4

    def reset(self, n: int, rng: np.random.Generator) -> PointState:
        p = self.params
        return PointState(np.zeros((n, 2)), p.init_noise * rng.standard_normal((n, 2)))

    def cost(self, state: PointState) -> np.ndarray:
        p = self.params
        speed = np.linalg.norm(state.velocity, axis=1)
        return ((speed > p.speed_limit) | (np.abs(state.position[:, 1]) > p.y_lim)).astype(float)

    def reward(self, state: PointState) -> np.ndarray:
        return state.velocity[:, 0] / self.params.v_max

    def step(self, state: PointState, action):
        p = self.params
        nxt = _point_dynamics(state, action, p.accel, p.damping, p.v_max, p.dt)
        return nxt, self.reward(nxt), self.cost(nxt), np.zeros(len(nxt.t), dtype=bool)

    def observe(self, state: PointState) -> np.ndarray:
        p = self.params
        return np.column_stack([
            state.position[:, 0] / (self.horizon * p.v_max),
            state.position[:, 1] / p.y_lim,
            state.velocity / p.v_max,
        ])


class PointCircle(BatchEnv):
    """Circle the origin at radius ``r_circle`` while staying inside ``|x| < x_lim``."""

    name = "point_circle"
    params_cls = PointParams
    horizon = 250
    cost_limit = 25.0
    obs_dim = 4

    def reset(self, n: int, rng: np.random.Generator) -> PointState:
        p = self.params
        return PointState(p.init_noise * rng.standard_normal((n, 2)), np.zeros((n, 2)))

    def reward(self, state: PointState) -> np.ndarray:
        x, y = state.position[:, 0], state.position[:, 1]
        r_agent = np.hypot(x, y)
        tangential = -state.velocity[:, 0] * y + state.velocity[:, 1] * x
        return tangential / (1.0 + 3.0 * np.abs(r_agent - self.params.r_circle))

    def cost(self, state: PointState) -> np.ndarray:
        return (np.abs(state.position[:, 0]) >= self.params.x_lim).astype(float)

    def step(self, state: PointState, action):
        p = self.params
        r = self.reward(state)
        nxt = _point_dynamics(state, action, p.circle_accel, p.damping, p.circle_v_max, p.dt)
        return nxt, r, self.cost(nxt), np.zeros(len(nxt.t), dtype=bool)

    def observe(self, state: PointState) -> np.ndarray:
        return np.column_stack([state.position / self.params.r_circle, state.velocity / self.params.circle_v_max])


# --------------------------------------------------------------------------
# Cart-pole
# --------------------------------------------------------------------------

@dataclass
class CartState:
    x: np.ndarray
    x_dot: np.ndarray
    theta: np.ndarray
    theta_dot: np.ndarray
    t: np.ndarray = None

    def __post_init__(self):
        self.x, self.x_dot, self.theta, self.theta_dot = (
            np.atleast_1d(np.asarray(v, dtype=float)) for v in (self.x, self.x_dot, self.theta, self.theta_dot))
        if self.t is None:
            self.t = np.zeros(len(self.x), dtype=int)


@dataclass(frozen=True)
class CartParams:
    gravity: float = 9.8
    masscart: float = 1.0
    masspole: float = 0.1
    length: float = 0.5  # half the pole length
    force_mag: float = 10.0
    tau: float = 0.02
    x_threshold: float = 2.4
    band: float = 1.0
    literal_cost: bool = False
    max_steps: int = 300
    init_noise: float = 0.05


def wrap_angle(theta):
    return np.pi - np.mod(np.pi - theta, 2 * np.pi)


class CartSafe(BatchEnv):
    """Keep the pole up (reward ``1 + cos angle``) and the cart inside a central band."""

    name = "cart_safe"
    params_cls = CartParams
    horizon = 300
    cost_limit = 1.0
    obs_dim = 5
    action_kind = "discrete"
    action_dim = 2

    def reset(self, n: int, rng: np.random.Generator) -> CartState:
        u = rng.uniform(-self.params.init_noise, self.params.init_noise, size=(4, n))
        return CartState(*u)

    def reward(self, state: CartState) -> np.ndarray:
        return 1.0 + np.cos(state.theta)

    def cost(self, state: CartState) -> np.ndarray:
        p = self.params
        inside = np.abs(state.x) < p.band
        return (inside if p.literal_cost else ~inside).astype(float)

    def step(self, state: CartState, action):
        p = self.params
        r = self.reward(state)
        force = np.where(np.asarray(action) == 1, p.force_mag, -p.force_mag)
        total_mass = p.masscart + p.masspole
        pml = p.masspole * p.length
        cos, sin = np.cos(state.theta), np.sin(state.theta)
        temp = (force + pml * state.theta_dot ** 2 * sin) / total_mass
        theta_acc = (p.gravity * sin - cos * temp) / (
            p.length * (4.0 / 3.0 - p.masspole * cos ** 2 / total_mass))
        x_acc = temp - pml * theta_acc * cos / total_mass
        x_dot = state.x_dot + p.tau * x_acc
        x = state.x + p.tau * x_dot
        theta_dot = state.theta_dot + p.tau * theta_acc
        theta = wrap_angle(state.theta + p.tau * theta_dot)
        nxt = CartState(x, x_dot, theta, theta_dot, state.t + 1)
        done = (np.abs(x) > p.x_threshold) | (nxt.t >= p.max_steps)
        return nxt, r, self.cost(nxt), done

    def observe(self, state: CartState) -> np.ndarray:
        return np.column_stack([state.x / self.params.x_threshold, state.x_dot / 2.0,
                                np.cos(state.theta), np.sin(state.theta), state.theta_dot / 4.0])


# --------------------------------------------------------------------------
# Gather grid
# --------------------------------------------------------------------------

@dataclass
class GatherState:
    agent: np.ndarray  # (n, 2) integer cell
    blue: np.ndarray   # (n, G, G) bool
    red: np.ndarray    # (n, G, G) bool
    t: np.ndarray = None
    picked_red: np.ndarray = None

    def __post_init__(self):
        self.agent = np.atleast_2d(np.asarray(self.agent, dtype=int))
        n = len(self.agent)
        if self.t is None:
            self.t = np.zeros(n, dtype=int)
        if self.picked_red is None:
            self.picked_red = np.zeros(n, dtype=bool)


@dataclass(frozen=True)
class GatherParams:
    size: int = 7
    n_blue: int = 4
    n_red: int = 4


MOVES = np.array([[0, 0], [0, 1], [0, -1], [-1, 0], [1, 0]])


class GatherGrid(BatchEnv):
    """Collect blue items (+10) on a grid while avoiding red ones (cost 1)."""

    name = "gather_grid"
    params_cls = GatherParams
    horizon = 250
    cost_limit = 0.2
    obs_dim = 10
    action_kind = "discrete"
    action_dim = 5

    def reset(self, n: int, rng: np.random.Generator) -> GatherState:
        G, nb, nr = self.params.size, self.params.n_blue, self.params.n_red
        centre = (G // 2) * G + G // 2
        blue = np.zeros((n, G * G), dtype=bool)
        red = np.zeros((n, G * G), dtype=bool)
        cells = np.delete(np.arange(G * G), centre)
        for i in range(n):
            pick = rng.choice(cells, size=nb + nr, replace=False)
            blue[i, pick[:nb]] = True
            red[i, pick[nb:]] = True
        agent = np.full((n, 2), G // 2)
        return GatherState(agent, blue.reshape(n, G, G), red.reshape(n, G, G))

    def cost(self, state: GatherState) -> np.ndarray:
        return state.picked_red.astype(float)

    def step(self, state: GatherState, action):
        G = self.params.size
        a = np.asarray(action, dtype=int).reshape(-1)
        agent = np.clip(state.agent + MOVES[a], 0, G - 1)
        idx = np.arange(len(a))
        got_blue = state.blue[idx, agent[:, 0], agent[:, 1]]
        got_red = state.red[idx, agent[:, 0], agent[:, 1]]
        blue, red = state.blue.copy(), state.red.copy()
        blue[idx, agent[:, 0], agent[:, 1]] = False
        red[idx, agent[:, 0], agent[:, 1]] = False
        nxt = GatherState(agent, blue, red, state.t + 1, got_red)
        return nxt, 10.0 * got_blue, self.cost(nxt), np.zeros(len(a), dtype=bool)

    def _nearest(self, agent, items):
        n, G = len(agent), self.params.size
        out = np.zeros((n, 2))
        for i in range(n):
            cells = np.argwhere(items[i])
            if len(cells):
                d = cells - agent[i]
                out[i] = d[np.argmin(np.abs(d).sum(axis=1))] / (G - 1)
        return out

    def observe(self, state: GatherState) -> np.ndarray:
        G = self.params.size
        n = len(state.agent)
        neigh = np.zeros((n, 4))
        for j, mv in enumerate(MOVES[1:]):
            cell = state.agent + mv
            ok = np.all((cell >= 0) & (cell < G), axis=1)
            c = np.clip(cell, 0, G - 1)
            neigh[:, j] = ok & state.red[np.arange(n), c[:, 0], c[:, 1]]
        return np.column_stack([state.agent / (G - 1), self._nearest(state.agent, state.blue),
                                self._nearest(state.agent, state.red), neigh])


@dataclass
class TabularState:
    s: np.ndarray
    t: np.ndarray = None

    def __post_init__(self):
        self.s = np.atleast_1d(np.asarray(self.s, dtype=int))
        if self.t is None:
            self.t = np.zeros(len(self.s), dtype=int)


@dataclass(frozen=True)
class TabularParams:
    pass


class TabularCmdpEnv(BatchEnv):
    """Batched sampler for a :class:`TabularCmdp` with one-hot state features."""

    params_cls = TabularParams
    action_kind = "discrete"

    def __init__(self, cmdp, name: str = "tabular"):
        super().__init__()
        self.cmdp = cmdp
        self.name = name
        self.horizon = cmdp.horizon_T
        self.cost_limit = cmdp.budget_c0
        self.obs_dim = cmdp.n_states
        self.action_dim = cmdp.n_actions
        self._cum = np.cumsum(cmdp.transition, axis=2)

    def reset(self, n: int, rng: np.random.Generator) -> TabularState:
        self._rng = rng
        return TabularState(np.full(n, self.cmdp.initial_state))

    def cost(self, state: TabularState) -> np.ndarray:
        return self.cmdp.cost[state.s].astype(float)

    def step(self, state: TabularState, action):
        a = np.asarray(action, dtype=int).reshape(-1)
        r = self.cmdp.reward[state.s, a]
        u = self._rng.random(len(a))[:, None]
        s2 = np.minimum((self._cum[state.s, a] < u).sum(axis=1), self.cmdp.n_states - 1)
        nxt = TabularState(s2, state.t + 1)
        return nxt, r, self.cost(nxt), np.zeros(len(a), dtype=bool)

    def observe(self, state: TabularState) -> np.ndarray:
        return np.eye(self.cmdp.n_states)[state.s]


REGISTRY = {cls.name: cls for cls in (PointRun, PointCircle, CartSafe, GatherGrid)}


def make_env(name: str, **overrides) -> BatchEnv:
    """Build an environment by name; toy fixture names give tabular environments."""
    if name not in REGISTRY:
        from .toys import FIXTURES
        if name in FIXTURES:
            if overrides:
                raise ValueError("tabular environments take no parameter overrides")
            return TabularCmdpEnv(FIXTURES[name]().cmdp, name)
        raise KeyError(f"unknown environment {name!r}; choose from {sorted(REGISTRY)}")
    return REGISTRY[name](**overrides)


def point_run_step(state: PointState, action, **overrides):
    s, r, c, _ = PointRun(**overrides).step(state, action)
    return s, r, c


def point_circle_step(state: PointState, action, **overrides):
    s, r, c, _ = PointCircle(**overrides).step(state, action)
    return s, r, c


def cart_safe_step(state: CartState, action, **overrides):
    return CartSafe(**overrides).step(state, action)


def gather_grid_step(state: GatherState, action, **overrides):
    s, r, c, _ = GatherGrid(**overrides).step(state, action)
    return s, r, c
