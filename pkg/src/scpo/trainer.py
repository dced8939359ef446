"""Clipped policy optimization with a safety critic, plus Lagrangian and unconstrained baselines.

One iteration collects whole episodes in parallel, estimates the safety Q of
every step from the safety critic, transforms rewards with it, computes GAE
and then runs minibatch epochs over the policy, value and safety networks.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import nn
from .cmdp import Trajectory, budget_q_clip, safety_flag
from .envs import BatchEnv, augment_observation, make_env
from .estimators import gae_advantages

MODES = ("scpo", "lagrangian", "unconstrained")
ESTIMATORS = ("L1", "L2")
METRIC_FIELDS = ("iteration", "env_steps", "mean_return", "mean_cost", "cost_std",
                 "vc_loss", "value_loss", "surrogate_loss", "entropy")


class ConfigError(ValueError):
    """Invalid training configuration; the message names the offending field."""


class NumericAbort(FloatingPointError):
    """Training produced a non-finite loss."""


# Per-task defaults keyed by table column; ``env`` maps to the desk-scale stand-in.
TABLE_DEFAULTS = {
    "BallCircle": dict(env="point_circle", entropy_coef=0.01, reward_bias_b=1.5, k=2, beta=0.0),
    "BallGather": dict(env="gather_grid", entropy_coef=0.01, reward_bias_b=0.05, k=4, beta=15.0),
    "BallRun": dict(env="point_run", entropy_coef=0.005, reward_bias_b=1.0, k=4, beta=0.5),
    "BallReach": dict(env=None, entropy_coef=0.01, reward_bias_b=0.1, k=4, beta=0.0),
    "CartSafe": dict(env="cart_safe", entropy_coef=0.001, reward_bias_b=0.0, k=5, beta=3.0),
}
ENV_TABLE = {v["env"]: name for name, v in TABLE_DEFAULTS.items() if v["env"]}


@dataclass(frozen=True)
class TrainConfig:
    env: str = "point_run"
    k: float = 4
    beta: float = 0.5
    reward_bias_b: float = 1.0
    clip_epsilon: float = 0.2
    entropy_coef: float = 0.005
    batch_size: int = 64
    epochs_per_iter: int = 5
    timesteps_T: int = 32768
    gamma: float = 0.99
    gae_lambda: float = 0.95
    safety_gamma: float = 0.995
    learning_rate: float = 2e-4
    estimator_choice: str = "L1"
    seed: int = 0
    mode: str = "scpo"
    n_iterations: int = 10
    normalize_advantages: bool = True
    hidden_sizes: tuple = (64, 64)
    log_std_init: float = -0.5
    safety_init_bias: float = 0.05
    max_grad_norm: float | None = None
    delta: float = 0.01
    augment: bool = True
    checkpoint_every: int = 0
    env_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        k = self.k
        if isinstance(k, str):
            if k.lower() not in ("inf", "infinity"):
                raise ConfigError(f"k: expected a nonnegative integer or 'inf', got {k!r}")
            object.__setattr__(self, "k", math.inf)
        elif not (math.isinf(k) or (float(k) == int(k) and k >= 0)):
            raise ConfigError(f"k: expected a nonnegative integer or inf, got {k!r}")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        checks = [
            ("beta", self.beta >= 0, "must be >= 0"),
            ("reward_bias_b", self.reward_bias_b >= 0, "must be >= 0"),
            ("clip_epsilon", self.clip_epsilon > 0, "must be > 0"),
            ("entropy_coef", self.entropy_coef >= 0, "must be >= 0"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("batch_size", self.batch_size <= self.timesteps_T, "must not exceed timesteps_T"),
            ("epochs_per_iter", self.epochs_per_iter >= 1, "must be >= 1"),
            ("gamma", 0 < self.gamma <= 1, "must lie in (0, 1]"),
            ("gae_lambda", 0 <= self.gae_lambda <= 1, "must lie in [0, 1]"),
            ("safety_gamma", 0 < self.safety_gamma <= 1, "must lie in (0, 1]"),
            ("learning_rate", self.learning_rate > 0, "must be > 0"),
            ("estimator_choice", self.estimator_choice in ESTIMATORS, f"must be one of {ESTIMATORS}"),
            ("mode", self.mode in MODES, f"must be one of {MODES}"),
            ("n_iterations", self.n_iterations >= 1, "must be >= 1"),
            ("delta", self.delta > 0, "must be > 0"),
            ("hidden_sizes", len(self.hidden_sizes) >= 1 and min(self.hidden_sizes) >= 1, "must be positive widths"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{name}: {msg} (got {getattr(self, name)!r})")

    @classmethod
    def from_table(cls, name: str, **overrides) -> "TrainConfig":
        """Defaults for a table column (``"BallRun"``) or its environment (``"point_run"``)."""
        key = ENV_TABLE.get(name, name)
        if key not in TABLE_DEFAULTS:
            raise ConfigError(f"unknown table entry {name!r}; choose from {sorted(TABLE_DEFAULTS) + sorted(ENV_TABLE)}")
        base = {k: v for k, v in TABLE_DEFAULTS[key].items() if v is not None}
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as err:
            raise ConfigError(str(err)) from err

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        if math.isinf(self.k):
            d["k"] = "inf"
        return d

    def effective(self) -> "TrainConfig":
        """Unconstrained mode ignores the safety critic in the reward (k=0, beta=0)."""
        if self.mode == "unconstrained":
            return replace(self, k=0, beta=0.0)
        return self


@dataclass(frozen=True)
class IterationMetrics:
    iteration: int
    env_steps: int
    mean_return: float
    mean_cost: float
    cost_std: float
    vc_loss: float
    value_loss: float
    surrogate_loss: float
    entropy: float

    def __post_init__(self):
        for name in METRIC_FIELDS[2:]:
            if not math.isfinite(getattr(self, name)):
                raise NumericAbort(f"non-finite metric {name}")
        if self.cost_std < 0:
            raise ValueError("cost_std must be nonnegative")


# --------------------------------------------------------------------------
# Reward transform and surrogate
# --------------------------------------------------------------------------

def power_k(q, k):
    """``q ** k`` with ``q ** 0 == 1`` and ``k = inf`` as the indicator ``q == 1``."""
    q = np.asarray(q, dtype=float)
    if k == 0:
        return np.ones_like(q)
    if math.isinf(k):
        return (np.abs(q - 1.0) <= 1e-9).astype(float)
    return q ** k


def transform_rewards_array(rewards, costs, qc_hat, cfg: TrainConfig, mask=None) -> np.ndarray:
    """Vectorized reward transform; ``mask`` selects the steps that must obey ``r + b >= 0``."""
    cfg = cfg.effective()
    r = np.asarray(rewards, dtype=float) + cfg.reward_bias_b
    c = np.asarray(costs, dtype=float)
    if cfg.mode == "lagrangian":
        return r - cfg.beta * c
    bad = (r < 0) if mask is None else (r < 0) & mask
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"r + b < 0 at step {idx}: value {r[idx]!r}; increase reward_bias_b")
    qk = power_k(qc_hat, cfg.k)
    return r * qk - cfg.beta * (1.0 - qk) * c


def transform_rewards(traj: Trajectory, qc_hat, cfg: TrainConfig) -> np.ndarray:
    q = np.asarray(qc_hat, dtype=float)
    if q.shape != (len(traj),):
        raise ValueError("qc_hat must align with the trajectory")
    if np.any((q < 0) | (q > 1)):
        raise ValueError("qc_hat must lie in [0, 1]")
    return transform_rewards_array(traj.rewards, traj.costs, q, cfg)


def surrogate_loss_and_grad(cfg: TrainConfig, old_log_probs, new_log_probs, advantages, entropy=0.0):
    """Clipped surrogate loss and its gradient w.r.t. ``new_log_probs``.

    ``entropy`` is the mean policy entropy over the batch; the bonus only
    shifts the loss here, its gradient is handled by the caller.
    """
    old = np.asarray(old_log_probs, dtype=float)
    new = np.asarray(new_log_probs, dtype=float)
    adv = np.asarray(advantages, dtype=float)
    ratio = np.exp(new - old)
    if not np.all(np.isfinite(ratio)):
        raise NumericAbort("non-finite probability ratio")
    if cfg.estimator_choice == "L1":
        r, dr = ratio - 1.0, ratio
    else:
        r, dr = 1.0 - 1.0 / ratio, 1.0 / ratio
    eps = cfg.clip_epsilon
    unclipped = r * adv
    clipped = np.clip(r, -eps, eps) * adv
    use_unclipped = unclipped <= clipped
    term = np.where(use_unclipped, unclipped, clipped)
    n = len(adv)
    loss = -float(term.mean()) - cfg.entropy_coef * float(entropy)
    grad = -np.where(use_unclipped, adv * dr, 0.0) / n
    return loss, grad


def surrogate_loss(cfg, old_log_probs, new_log_probs, advantages, entropy=0.0) -> float:
    return surrogate_loss_and_grad(cfg, old_log_probs, new_log_probs, advantages, entropy)[0]


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------

def _sub(params: dict, prefix: str) -> nn.MlpParams:
    n = len(prefix) + 1
    return nn.MlpParams({k[n:]: v for k, v in params.items() if k.startswith(prefix + "/") and k[n:] != "log_std"})


def init_params(cfg: TrainConfig, obs_dim: int, env: BatchEnv, rng: np.random.Generator) -> dict:
    sizes = list(cfg.hidden_sizes)
    params = {}
    nets = {
        "policy": ([obs_dim] + sizes + [env.action_dim], 0.01),
        "value": ([obs_dim] + sizes + [1], 1.0),
        "safety": ([obs_dim] + sizes + [1], 0.01),
    }
    for name, (layers, gain) in nets.items():
        mlp = nn.init_mlp(layers, rng, hidden_gain=float(np.sqrt(2)), out_gain=gain)
        params.update({f"{name}/{k}": v for k, v in mlp.tensors.items()})
    # a small positive offset keeps the clipped safety head off its flat region at start
    last = len(sizes)
    params[f"safety/b{last}"] = np.full(1, cfg.safety_init_bias)
    if env.action_kind == "box":
        params["policy/log_std"] = np.full(env.action_dim, cfg.log_std_init)
    return params


class Agent:
    """Forward passes of the three networks over a flat parameter dict."""

    def __init__(self, params: dict, action_kind: str):
        self.params = params
        self.action_kind = action_kind

    def policy_out(self, obs):
        return nn.forward(_sub(self.params, "policy"), obs)

    def head(self, out):
        if self.action_kind == "box":
            return nn.GaussianPolicyHead(out, self.params["policy/log_std"])
        return nn.CategoricalPolicyHead(out)

    def value(self, obs) -> np.ndarray:
        return nn.forward(_sub(self.params, "value"), obs)[0][..., 0]

    def safety(self, obs) -> np.ndarray:
        return nn.safety_head(nn.forward(_sub(self.params, "safety"), obs)[0][..., 0])

    def act(self, obs, rng, deterministic=False):
        out, _ = self.policy_out(obs)
        head = self.head(out)
        if deterministic:
            a = out if self.action_kind == "box" else np.argmax(out, axis=-1)
        else:
            a = head.sample(rng)
        return a, head.log_prob(a)


# --------------------------------------------------------------------------
# Rollouts
# --------------------------------------------------------------------------

@dataclass
class Batch:
    obs: np.ndarray        # (n, H+1, d) observation of s_t; index L holds the terminal state
    actions: np.ndarray    # (n, H) or (n, H, act_dim)
    log_probs: np.ndarray  # (n, H)
    rewards: np.ndarray    # (n, H) r(s_t, a_t)
    costs: np.ndarray      # (n, H) c(s_t)
    flags: np.ndarray      # (n, H+1) f(s_t); index L holds the terminal flag if done
    lengths: np.ndarray    # (n,)
    done: np.ndarray       # (n,) terminated before the horizon
    final_cost: np.ndarray  # (n,) cumulative cost of the whole trajectory

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.rewards.shape[1])[None, :] < self.lengths[:, None]

    @property
    def returns(self) -> np.ndarray:
        return (self.rewards * self.mask).sum(axis=1)


def collect(env: BatchEnv, agent: Agent, n_episodes: int, rng: np.random.Generator, c0: float,
            delta: float = 0.01, augment: bool = True, deterministic: bool = False) -> Batch:
    """Run ``n_episodes`` complete episodes side by side."""
    H = env.horizon
    state = env.reset(n_episodes, rng)
    q = env.cost(state).astype(float)
    obs, acts, logps, rews, costs, flags = [], [], [], [], [], []
    alive = np.ones(n_episodes, dtype=bool)
    lengths = np.full(n_episodes, H)
    done_any = np.zeros(n_episodes, dtype=bool)
    for t in range(H):
        o = augment_observation(env.observe(state), q, c0, delta, augment)
        a, lp = agent.act(o, rng, deterministic)
        c_now = env.cost(state) if t > 0 else q.copy()
        obs.append(o)
        acts.append(a)
        logps.append(lp)
        costs.append(np.where(alive, c_now, 0.0))
        flags.append(safety_flag(budget_q_clip(q, c0, delta)))
        state, r, c_next, done = env.step(state, a)
        rews.append(np.where(alive, r, 0.0))
        # the state entered after the last step is outside the trajectory
        ending = alive & done & (t + 1 < H)
        lengths[ending] = t + 1
        done_any |= ending
        q = np.where(alive, q + c_next, q)
        alive &= ~ending
    # terminated episodes keep their terminal observation and flag at index L
    obs.append(augment_observation(env.observe(state), q, c0, delta, augment))
    flags.append(safety_flag(budget_q_clip(q, c0, delta)))
    final_q = q.copy()
    return Batch(np.stack(obs, axis=1), np.stack(acts, axis=1), np.stack(logps, axis=1),
                 np.stack(rews, axis=1), np.stack(costs, axis=1),
                 np.stack(flags, axis=1).astype(float), lengths, done_any, final_q)


def safety_targets(batch: Batch, safety_gamma: float) -> np.ndarray:
    """Discounted safety targets per step; the last state of each trajectory gets its flag."""
    n, H = batch.rewards.shape
    end = batch.lengths - 1 + batch.done  # index of the final state in the flag array
    f = batch.flags
    out = np.zeros((n, H + 1))
    nxt = np.zeros(n)
    for t in range(H, -1, -1):
        val = np.where(t == end, f[:, t], f[:, t] + safety_gamma * (nxt - f[:, t]))
        out[:, t] = np.where(t <= end, val, 0.0)
        nxt = out[:, t]
    return out[:, :H]


def qc_estimates(batch: Batch, vc_next: np.ndarray) -> np.ndarray:
    """One-step safety Q estimates ``f(s_t) V^c(s_{t+1})``; the last step uses final flags."""
    n, H = batch.rewards.shape
    f = batch.flags[:, :H]
    t = np.arange(H)[None, :]
    last = t == (batch.lengths - 1)[:, None]
    term = np.where(batch.done[:, None], batch.flags[:, 1:], 1.0)
    est = np.where(last, f * term, f * vc_next)
    return np.where(t < batch.lengths[:, None], est, 0.0)


# --------------------------------------------------------------------------
# Training state and iteration
# --------------------------------------------------------------------------

@dataclass
class TrainerState:
    cfg: TrainConfig
    env: BatchEnv
    params: dict
    opt: dict
    rollout_rng: np.random.Generator
    shuffle_rng: np.random.Generator
    iteration: int = 0
    env_steps: int = 0

    @property
    def agent(self) -> Agent:
        return Agent(self.params, self.env.action_kind)

    @property
    def c0(self) -> float:
        return float(self.env.cost_limit)

    @property
    def obs_dim(self) -> int:
        return self.env.obs_dim + (1 if self.cfg.augment else 0)


def init_state(cfg: TrainConfig, env: BatchEnv | None = None) -> TrainerState:
    env = env or make_env(cfg.env, **cfg.env_overrides)
    init_ss, roll_ss, shuf_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    obs_dim = env.obs_dim + (1 if cfg.augment else 0)
    params = init_params(cfg, obs_dim, env, np.random.default_rng(init_ss))
    opt = {name: nn.AdamState.zeros_like({k: v for k, v in params.items() if k.startswith(name + "/")})
           for name in ("policy", "value", "safety")}
    return TrainerState(cfg, env, params, opt, np.random.default_rng(roll_ss), np.random.default_rng(shuf_ss))


def _clip_grads(grads: dict, max_norm):
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        return {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


def policy_loss_and_grads(state: TrainerState, obs, actions, old_lp, adv):
    cfg, p = state.cfg.effective(), state.params
    net = _sub(p, "policy")
    out, cache = nn.forward(net, obs)
    B = len(obs)
    if state.env.action_kind == "box":
        log_std = p["policy/log_std"]
        new_lp = nn.gaussian_log_prob(out, log_std, actions)
        ent = nn.gaussian_entropy(log_std)
        loss, g_lp = surrogate_loss_and_grad(cfg, old_lp, new_lp, adv, ent)
        d_mean, d_logstd = nn.gaussian_log_prob_grads(out, log_std, actions)
        g_out = g_lp[:, None] * d_mean
        extra = {"policy/log_std": (g_lp[:, None] * d_logstd).sum(axis=0) - cfg.entropy_coef}
    else:
        lp_all = nn.log_softmax(out)
        probs = np.exp(lp_all)
        new_lp = lp_all[np.arange(B), actions]
        ents = -np.sum(probs * lp_all, axis=1)
        ent = float(ents.mean())
        loss, g_lp = surrogate_loss_and_grad(cfg, old_lp, new_lp, adv, ent)
        onehot = np.zeros_like(out)
        onehot[np.arange(B), actions] = 1.0
        g_out = g_lp[:, None] * (onehot - probs)
        # d(mean entropy)/d logits = -p (log p + H) / B
        g_out += cfg.entropy_coef * probs * (lp_all + ents[:, None]) / B
        extra = {}
    grads = {f"policy/{k}": v for k, v in nn.backward(net, cache, g_out).items()}
    grads.update(extra)
    return loss, grads


def regression_loss_and_grads(state, name, obs, target, squash=False):
    net = _sub(state.params, name)
    out, cache = nn.forward(net, obs)
    raw = out[:, 0]
    pred = nn.safety_head(raw) if squash else raw
    err = pred - target
    loss = float(np.mean(err ** 2))
    g = 2.0 * err / len(err)
    if squash:
        g = g * nn.safety_head_grad(raw)
    grads = {f"{name}/{k}": v for k, v in nn.backward(net, cache, g[:, None]).items()}
    return loss, grads


def _apply(state: TrainerState, name: str, grads: dict):
    cfg = state.cfg
    grads = _clip_grads(grads, cfg.max_grad_norm)
    sub = {k: v for k, v in state.params.items() if k.startswith(name + "/")}
    new, state.opt[name] = nn.adam_step(sub, grads, state.opt[name], lr=cfg.learning_rate)
    state.params.update(new)


def train_iteration(state: TrainerState, cfg: TrainConfig | None = None) -> tuple[TrainerState, IterationMetrics]:
    """One outer loop: collect, estimate, transform, GAE, then minibatch epochs."""
    cfg = (cfg or state.cfg)
    state.cfg = cfg
    eff = cfg.effective()
    env, agent = state.env, state.agent
    n_ep = max(1, math.ceil(cfg.timesteps_T / env.horizon))
    batch = collect(env, agent, n_ep, state.rollout_rng, state.c0, cfg.delta, cfg.augment)
    mask = batch.mask
    n, H = mask.shape

    flat_obs = batch.obs.reshape(n * (H + 1), -1)
    vc_all = agent.safety(flat_obs).reshape(n, H + 1)
    v_all = agent.value(flat_obs).reshape(n, H + 1)
    qc_hat = qc_estimates(batch, vc_all[:, 1:])
    r_prime = transform_rewards_array(batch.rewards, batch.costs, qc_hat, eff, mask) * mask
    values = np.where(np.arange(H + 1)[None, :] < batch.lengths[:, None], v_all, 0.0)
    adv = gae_advantages(r_prime, values, cfg.gamma, cfg.gae_lambda) * mask
    ret_target = adv + values[:, :H]
    vc_target = safety_targets(batch, cfg.safety_gamma)

    sel = mask.ravel()
    obs = batch.obs[:, :H].reshape(n * H, -1)[sel]
    acts = batch.actions.reshape((n * H,) + batch.actions.shape[2:])[sel]
    old_lp = batch.log_probs.ravel()[sel]
    A = adv.ravel()[sel]
    if cfg.normalize_advantages and len(A) > 1:
        A = (A - A.mean()) / (A.std() + 1e-8)
    R = ret_target.ravel()[sel]
    VC = vc_target.ravel()[sel]

    out, _ = agent.policy_out(obs)
    ent_now = agent.head(out).entropy()
    entropy = float(np.mean(ent_now))

    M = len(A)
    losses = {"surrogate": [], "value": [], "vc": []}
    for _ in range(cfg.epochs_per_iter):
        perm = state.shuffle_rng.permutation(M)
        for start in range(0, M, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            l_pi, g_pi = policy_loss_and_grads(state, obs[idx], acts[idx], old_lp[idx], A[idx])
            l_v, g_v = regression_loss_and_grads(state, "value", obs[idx], R[idx])
            l_c, g_c = regression_loss_and_grads(state, "safety", obs[idx], VC[idx], squash=True)
            if not all(math.isfinite(x) for x in (l_pi, l_v, l_c)):
                raise NumericAbort(f"non-finite loss at iteration {state.iteration + 1}")
            _apply(state, "policy", g_pi)
            _apply(state, "value", g_v)
            _apply(state, "safety", g_c)
            losses["surrogate"].append(l_pi)
            losses["value"].append(l_v)
            losses["vc"].append(l_c)

    state.iteration += 1
    state.env_steps += int(batch.lengths.sum())
    metrics = IterationMetrics(
        iteration=state.iteration,
        env_steps=state.env_steps,
        mean_return=float(batch.returns.mean()),
        mean_cost=float(batch.final_cost.mean()),
        cost_std=float(batch.final_cost.std()),
        vc_loss=float(np.mean(losses["vc"])),
        value_loss=float(np.mean(losses["value"])),
        surrogate_loss=float(np.mean(losses["surrogate"])),
        entropy=entropy,
    )
    return state, metrics


def lagrangian_baseline(cfg: TrainConfig) -> TrainConfig:
    """Same loop with ``r' = (r + b) - beta c`` and no safety weighting."""
    return replace(cfg, mode="lagrangian")


# --------------------------------------------------------------------------
# Evaluation, metrics files and checkpoints
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    mean_return: float
    mean_cost: float
    cost_std: float
    safe_fraction: float
    episodes: int


def evaluate(state: TrainerState, episodes: int, seed: int, deterministic: bool = False) -> EvalResult:
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    b = collect(state.env, state.agent, episodes, rng, state.c0, state.cfg.delta, state.cfg.augment, deterministic)
    safe = np.asarray(safety_flag(budget_q_clip(b.final_cost, state.c0, state.cfg.delta)), dtype=float)
    return EvalResult(float(b.returns.mean()), float(b.final_cost.mean()), float(b.final_cost.std()),
                      float(safe.mean()), episodes)


def random_policy_return(env: BatchEnv, episodes: int, seed: int) -> float:
    """Mean episode return of uniformly random actions (box actions drawn from [-1, 1])."""
    rng = np.random.default_rng(seed)
    state = env.reset(episodes, rng)
    total = np.zeros(episodes)
    alive = np.ones(episodes, dtype=bool)
    for _ in range(env.horizon):
        if env.action_kind == "discrete":
            a = rng.integers(0, env.action_dim, episodes)
        else:
            a = rng.uniform(-1.0, 1.0, (episodes, env.action_dim))
        state, r, _, done = env.step(state, a)
        total += np.where(alive, r, 0.0)
        alive &= ~done
    return float(total.mean())


def format_float(x: float) -> str:
    return repr(float(x))


def metrics_csv(history: list[IterationMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for m in history:
        row = [m.iteration, m.env_steps] + [format_float(getattr(m, f)) for f in METRIC_FIELDS[2:]]
        w.writerow(row)
    return buf.getvalue()


def atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def checkpoint_meta(state: TrainerState) -> dict:
    return {"config": state.cfg.to_dict(), "env": state.env.name, "iteration": state.iteration,
            "env_steps": state.env_steps, "obs_dim": state.obs_dim, "action_kind": state.env.action_kind}


def save_state(state: TrainerState, path) -> None:
    tensors = dict(state.params)
    for name, opt in state.opt.items():
        tensors.update({f"__opt_m__{k}": v for k, v in opt.m.items()})
        tensors.update({f"__opt_v__{k}": v for k, v in opt.v.items()})
    meta = checkpoint_meta(state)
    meta["opt_steps"] = {name: opt.step for name, opt in state.opt.items()}
    nn.save_checkpoint(path, {k.replace("__opt_", "opt_"): v for k, v in tensors.items()}, meta)


def load_state(path, env: BatchEnv | None = None) -> TrainerState:
    tensors, meta = nn.load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    state = init_state(cfg, env)
    if state.env.name != meta["env"] or state.obs_dim != meta["obs_dim"]:
        raise ValueError(f"checkpoint was trained on {meta['env']!r}, not {state.env.name!r}")
    state.params = {k: v for k, v in tensors.items() if not k.startswith("opt_")}
    for name in state.opt:
        m = {k[len("opt_m__"):]: v for k, v in tensors.items() if k.startswith("opt_m__" + name + "/")}
        v = {k[len("opt_v__"):]: v for k, v in tensors.items() if k.startswith("opt_v__" + name + "/")}
        state.opt[name] = nn.AdamState(m, v, int(meta["opt_steps"][name]))
    state.iteration, state.env_steps = int(meta["iteration"]), int(meta["env_steps"])
    return state


def run_training(cfg: TrainConfig, out_dir=None, env: BatchEnv | None = None, state: TrainerState | None = None):
    """Train for ``cfg.n_iterations``; writes ``metrics.csv`` and checkpoints when ``out_dir`` is set."""
    state = state or init_state(cfg, env)
    history: list[IterationMetrics] = []
    for _ in range(cfg.n_iterations):
        try:
            state, m = train_iteration(state)
        except (NumericAbort, nn.NonFiniteError):
            if out_dir is not None:
                save_state(state, os.path.join(out_dir, "abort_checkpoint.npz"))
            raise
        history.append(m)
        if out_dir is not None:
            atomic_write(os.path.join(out_dir, "metrics.csv"), metrics_csv(history))
            if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                save_state(state, os.path.join(out_dir, f"checkpoint_{state.iteration:05d}.npz"))
    if out_dir is not None:
        save_state(state, os.path.join(out_dir, "final_checkpoint.npz"))
    return state, history


def first_iteration_below(history: list[IterationMetrics], limit: float) -> float:
    """First iteration whose mean cost is at or below ``limit`` (inf if never)."""
    for m in history:
        if m.mean_cost <= limit:
            return m.iteration
    return math.inf


# --------------------------------------------------------------------------
# Estimator interface
# --------------------------------------------------------------------------

class SCPO(BaseEstimator):
    """Estimator wrapper: ``fit`` trains on an environment, ``predict`` maps observations to actions.

    Parameters mirror :class:`TrainConfig`. ``fit(X)`` accepts an optional
    environment name or instance in place of ``X``; otherwise ``env`` is used.
    """

    def __init__(self, env="point_run", mode="scpo", k=4, beta=0.5, reward_bias_b=1.0, clip_epsilon=0.2,
                 entropy_coef=0.005, batch_size=64, epochs_per_iter=5, timesteps_T=32768, gamma=0.99,
                 gae_lambda=0.95, safety_gamma=0.995, learning_rate=2e-4, estimator_choice="L1",
                 n_iterations=10, seed=0, normalize_advantages=True, hidden_sizes=(64, 64),
                 log_std_init=-0.5, safety_init_bias=0.05, max_grad_norm=None, delta=0.01, augment=True):
        self.env = env
        self.mode = mode
        self.k = k
        self.beta = beta
        self.reward_bias_b = reward_bias_b
        self.clip_epsilon = clip_epsilon
        self.entropy_coef = entropy_coef
        self.batch_size = batch_size
        self.epochs_per_iter = epochs_per_iter
        self.timesteps_T = timesteps_T
        self.gamma = gamma
        self.gae_lambda = gae_lambda
        self.safety_gamma = safety_gamma
        self.learning_rate = learning_rate
        self.estimator_choice = estimator_choice
        self.n_iterations = n_iterations
        self.seed = seed
        self.normalize_advantages = normalize_advantages
        self.hidden_sizes = hidden_sizes
        self.log_std_init = log_std_init
        self.safety_init_bias = safety_init_bias
        self.max_grad_norm = max_grad_norm
        self.delta = delta
        self.augment = augment

    def to_config(self) -> TrainConfig:
        params = self.get_params()
        env = params.pop("env")
        return TrainConfig(env=env if isinstance(env, str) else env.name, **params)

    def fit(self, X=None, y=None):
        env = X if X is not None else self.env
        env_obj = env if isinstance(env, BatchEnv) else None
        cfg = self.to_config()
        if isinstance(env, str):
            cfg = replace(cfg, env=env)
        self.state_, self.history_ = run_training(cfg, env=env_obj)
        self.n_features_in_ = self.state_.obs_dim
        return self

    def predict(self, X):
        """Deterministic action: the Gaussian mean or the most likely discrete action."""
        check_is_fitted(self, "state_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        out, _ = self.state_.agent.policy_out(X)
        return out if self.state_.env.action_kind == "box" else np.argmax(out, axis=1)

    def predict_proba(self, X):
        check_is_fitted(self, "state_")
        if self.state_.env.action_kind != "discrete":
            raise AttributeError("predict_proba is only defined for discrete actions")
        X = check_array(X)
        out, _ = self.state_.agent.policy_out(X)
        return np.exp(nn.log_softmax(out))

    def predict_safety(self, X):
        """Safety-critic estimate of completing the episode within budget."""
        check_is_fitted(self, "state_")
        return self.state_.agent.safety(check_array(X))
