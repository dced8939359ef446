"""Finite constrained MDPs, trajectories and cumulative-cost augmentation.

Conventions used across the package:

* ``cost`` is a function of the visited state and accrues on entry; the
  initial state's cost counts at ``t = 0``.
* A trajectory of horizon ``T`` holds ``T`` (state, action, reward, cost)
  steps. The reward of step ``t`` is ``reward[s_t, a_t]``.
* Policies act on augmented states ``(s, q_clip)`` and additionally receive the
  time index, which stationary policies ignore.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
import yaml
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

DEFAULT_DELTA = 0.01
SIMPLEX_TOL = 1e-12


def augment_q(q_t: float, c0: float, delta: float = DEFAULT_DELTA) -> float:
    """Clipped normalized cumulative cost ``clip(q_t / c0, 0, 1 + delta)``."""
    if c0 <= 0:
        raise ValueError(f"c0 must be positive, got {c0!r}; use budget_q_clip for zero budgets")
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta!r}")
    return float(np.clip(q_t / c0, 0.0, 1.0 + delta))


def budget_q_clip(q_t, c0: float, delta: float = DEFAULT_DELTA):
    """Like :func:`augment_q` but also defined for ``c0 == 0``.

    With a zero budget any positive cumulative cost is unsafe, so the clipped
    value is 0 when ``q_t == 0`` and ``1 + delta`` otherwise. Works elementwise
    on arrays.
    """
    q = np.asarray(q_t, dtype=float)
    if c0 > 0:
        out = np.clip(q / c0, 0.0, 1.0 + delta)
    elif c0 == 0:
        out = np.where(q > 0, 1.0 + delta, 0.0)
    else:
        raise ValueError(f"c0 must be nonnegative, got {c0!r}")
    return float(out) if out.ndim == 0 else out


def safety_flag(q_clip) -> int:
    """1 if the augmented state is safe (``q_clip <= 1``), else 0."""
    q = np.asarray(q_clip)
    flag = (q <= 1.0).astype(int)
    return int(flag) if flag.ndim == 0 else flag


def check_flags(flags: Sequence[int]) -> np.ndarray:
    flags = np.asarray(flags)
    if flags.ndim != 1 or flags.size == 0:
        raise ValueError("safety flags must be a nonempty 1-d sequence")
    if not np.isin(flags, (0, 1)).all():
        raise ValueError("safety flags must be binary")
    if np.any(np.diff(flags.astype(int)) > 0):
        t = int(np.argmax(np.diff(flags.astype(int)) > 0)) + 1
        raise ValueError(f"safety flags must be nonincreasing; flag recovers at t={t}")
    return flags.astype(int)


@dataclass(frozen=True)
class TabularCmdp:
    """Finite-horizon CMDP with state costs and a cumulative-cost budget."""

    transition: np.ndarray
    reward: np.ndarray
    cost: np.ndarray
    budget_c0: float
    horizon_T: int
    initial_state: int = 0
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        r = np.array(self.reward, dtype=float)
        c = np.array(self.cost, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if r.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}, got {r.shape}")
        if c.shape != (S,):
            raise ValueError(f"cost must have shape {(S,)}, got {c.shape}")
        if np.any(P < 0):
            s, a, _ = np.argwhere(P < 0)[0]
            raise ValueError(f"negative transition probability at (s={s}, a={a})")
        row_err = np.abs(P.sum(axis=2) - 1.0)
        if np.any(row_err > SIMPLEX_TOL):
            s, a = np.argwhere(row_err > SIMPLEX_TOL)[0]
            raise ValueError(
                f"transition row (s={s}, a={a}) sums to {P[s, a].sum()!r}, not 1"
            )
        if np.any(c < 0):
            raise ValueError("costs must be nonnegative")
        if not np.all(np.isfinite(r)):
            raise ValueError("rewards must be finite")
        if self.budget_c0 < 0:
            raise ValueError("budget_c0 must be nonnegative")
        if int(self.horizon_T) < 1:
            raise ValueError("horizon_T must be >= 1")
        if not 0 <= int(self.initial_state) < S:
            raise ValueError(f"initial_state {self.initial_state} out of range")
        for arr in (P, r, c):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "cost", c)
        object.__setattr__(self, "budget_c0", float(self.budget_c0))
        object.__setattr__(self, "horizon_T", int(self.horizon_T))
        object.__setattr__(self, "initial_state", int(self.initial_state))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def q_clip(self, q):
        return budget_q_clip(q, self.budget_c0, self.delta)

    def flag(self, q):
        """Safety flag of raw cumulative cost ``q``."""
        return safety_flag(self.q_clip(q))

    def replace(self, **changes) -> "TabularCmdp":
        fields = dict(
            transition=self.transition, reward=self.reward, cost=self.cost,
            budget_c0=self.budget_c0, horizon_T=self.horizon_T,
            initial_state=self.initial_state, delta=self.delta,
        )
        fields.update(changes)
        return TabularCmdp(**fields)

    def is_deterministic(self) -> bool:
        return bool(np.all((self.transition == 0) | (self.transition == 1)))


# --------------------------------------------------------------------------
# Policies
# --------------------------------------------------------------------------

class Policy(Protocol):
    n_actions: int

    def probs(self, state: int, q_clip: float, t: int) -> np.ndarray:
        ...


def check_distribution(p, n_actions: int, tol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape != (n_actions,):
        raise ValueError(f"policy returned shape {p.shape}, expected ({n_actions},)")
    if np.any(p < -tol) or abs(p.sum() - 1.0) > tol:
        raise ValueError(f"policy returned a non-normalized distribution {p!r}")
    return p


class TabularPolicy:
    """Markov policy over base states; ignores the cumulative cost and time."""

    def __init__(self, table):
        table = np.array(table, dtype=float)
        if table.ndim != 2:
            raise ValueError("policy table must be (n_states, n_actions)")
        for row in table:
            check_distribution(row, table.shape[1])
        table.setflags(write=False)
        self.table = table
        self.n_actions = table.shape[1]

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def from_logits(cls, logits) -> "TabularPolicy":
        logits = np.asarray(logits, dtype=float)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return cls(z / z.sum(axis=1, keepdims=True))

    def probs(self, state, q_clip, t):
        return self.table[state]

    def __repr__(self):
        return f"TabularPolicy({self.table.tolist()!r})"


class QTablePolicy:
    """Policy over augmented states with integer cost resolution.

    ``table[s, j]`` is used when ``round(q_clip * c0) == j`` (clipped to the
    last level, which collects every over-budget value).
    """

    def __init__(self, table, c0: float):
        table = np.array(table, dtype=float)
        if table.ndim != 3:
            raise ValueError("table must be (n_states, n_levels, n_actions)")
        for row in table.reshape(-1, table.shape[-1]):
            check_distribution(row, table.shape[-1])
        table.setflags(write=False)
        self.table = table
        self.c0 = float(c0)
        self.n_actions = table.shape[-1]

    def level(self, q_clip: float) -> int:
        n_levels = self.table.shape[1]
        if q_clip > 1.0:
            return n_levels - 1
        return min(int(round(q_clip * self.c0)), n_levels - 1)

    def probs(self, state, q_clip, t):
        return self.table[state, self.level(q_clip)]


class FunctionPolicy:
    """Adapter for an arbitrary ``fn(state, q_clip, t) -> probabilities``."""

    def __init__(self, fn: Callable[[int, float, int], np.ndarray], n_actions: int):
        self.fn = fn
        self.n_actions = n_actions

    def probs(self, state, q_clip, t):
        return np.asarray(self.fn(state, q_clip, t), dtype=float)


class DeterministicPolicy:
    """Deterministic policy over ``(t, state, q_clip)`` keys.

    Keys not present in ``mapping`` fall back to ``default``.
    """

    def __init__(self, mapping: Mapping[tuple, int], n_actions: int, default: int = 0):
        self.mapping = {(int(t), int(s), round(float(q), 9)): int(a) for (t, s, q), a in mapping.items()}
        self.n_actions = n_actions
        self.default = default

    def action(self, state, q_clip, t) -> int:
        return self.mapping.get((int(t), int(state), round(float(q_clip), 9)), self.default)

    def probs(self, state, q_clip, t):
        p = np.zeros(self.n_actions)
        p[self.action(state, q_clip, t)] = 1.0
        return p


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """Ordered record of one episode with cumulative-cost bookkeeping."""

    states: tuple
    actions: tuple
    rewards: tuple
    costs: tuple
    cumulative_costs: tuple = field(default=())
    safety_flags: tuple = field(default=())

    def __post_init__(self):
        n = len(self.states)
        if not (len(self.actions) == len(self.rewards) == len(self.costs) == n):
            raise ValueError("trajectory columns must have equal length")
        if any(c < 0 for c in self.costs):
            raise ValueError("costs must be nonnegative")
        if not self.cumulative_costs:
            object.__setattr__(self, "cumulative_costs", tuple(np.cumsum(self.costs).tolist()))
        if len(self.cumulative_costs) != n:
            raise ValueError("cumulative_costs length mismatch")
        if np.any(np.diff(self.cumulative_costs) < 0):
            raise ValueError("cumulative costs must be nondecreasing")
        if self.safety_flags:
            if len(self.safety_flags) != n:
                raise ValueError("safety_flags length mismatch")
            check_flags(self.safety_flags)

    def __len__(self):
        return len(self.states)

    @classmethod
    def from_arrays(cls, cmdp: TabularCmdp, states, actions) -> "Trajectory":
        states = [int(s) for s in states]
        actions = [int(a) for a in actions]
        rewards = [float(cmdp.reward[s, a]) for s, a in zip(states, actions)]
        costs = [float(cmdp.cost[s]) for s in states]
        q = np.cumsum(costs)
        flags = cmdp.flag(q)
        return cls(tuple(states), tuple(actions), tuple(rewards), tuple(costs),
                   tuple(q.tolist()), tuple(int(f) for f in np.atleast_1d(flags)))

    def total_reward(self, gamma: float = 1.0) -> float:
        return float(np.sum(np.asarray(self.rewards) * gamma ** np.arange(len(self))))


def trajectory_safety(traj) -> int:
    """Product of per-step safety flags; accepts a Trajectory or a flag sequence."""
    flags = traj.safety_flags if isinstance(traj, Trajectory) else traj
    if len(flags) == 0:
        raise ValueError("trajectory safety is undefined for an empty trajectory")
    flags = check_flags(flags)
    return int(np.prod(flags))


def _sample(p, rng) -> int:
    # inverse CDF; much cheaper than Generator.choice for tiny supports
    return min(int(np.searchsorted(np.cumsum(p), rng.random(), side="right")), len(p) - 1)


def rollout(cmdp: TabularCmdp, policy: Policy, rng_seed: int, start_state: int | None = None) -> Trajectory:
    """Sample one horizon-length trajectory; deterministic given the seed."""
    rng = np.random.default_rng(rng_seed)
    s = cmdp.initial_state if start_state is None else int(start_state)
    q = 0.0
    states, actions = [], []
    for t in range(cmdp.horizon_T):
        q += cmdp.cost[s]
        p = check_distribution(policy.probs(s, cmdp.q_clip(q), t), cmdp.n_actions)
        a = _sample(p, rng)
        states.append(s)
        actions.append(a)
        if t + 1 < cmdp.horizon_T:
            s = _sample(cmdp.transition[s, a], rng)
    return Trajectory.from_arrays(cmdp, states, actions)


# --------------------------------------------------------------------------
# Text format
# --------------------------------------------------------------------------

def dump_cmdp(cmdp: TabularCmdp) -> str:
    """Serialize to the structured key-value text format (YAML)."""
    doc = {
        "n_states": cmdp.n_states,
        "n_actions": cmdp.n_actions,
        "transition": cmdp.transition.ravel().tolist(),
        "reward": cmdp.reward.ravel().tolist(),
        "cost": cmdp.cost.tolist(),
        "c0": cmdp.budget_c0,
        "T": cmdp.horizon_T,
        "s0": cmdp.initial_state,
        "delta": cmdp.delta,
    }
    return yaml.safe_dump(doc, sort_keys=False)


def load_cmdp(text: str) -> TabularCmdp:
    doc = yaml.safe_load(text)
    missing = {"n_states", "n_actions", "transition", "reward", "cost", "c0", "T", "s0"} - set(doc)
    if missing:
        raise ValueError(f"CMDP document missing keys: {sorted(missing)}")
    S, A = int(doc["n_states"]), int(doc["n_actions"])
    P = np.asarray(doc["transition"], dtype=float)
    r = np.asarray(doc["reward"], dtype=float)
    if P.size != S * A * S or r.size != S * A:
        raise ValueError("flattened tensor sizes do not match n_states/n_actions")
    return TabularCmdp(
        transition=P.reshape(S, A, S),
        reward=r.reshape(S, A),
        cost=np.asarray(doc["cost"], dtype=float),
        budget_c0=float(doc["c0"]),
        horizon_T=int(doc["T"]),
        initial_state=int(doc["s0"]),
        delta=float(doc.get("delta", DEFAULT_DELTA)),
    )


# --------------------------------------------------------------------------
# Estimator-style augmentation
# --------------------------------------------------------------------------

class CumulativeCostAugmenter(BaseEstimator, TransformerMixin):
    """Replace the trailing raw cumulative-cost column with ``q_clip``.

    Parameters
    ----------
    c0 : float
        Cumulative-cost budget. Zero means any cost is unsafe.
    delta : float
        Upper clip margin; values are clipped to ``[0, 1 + delta]``.
    """

    def __init__(self, c0: float = 1.0, delta: float = DEFAULT_DELTA):
        self.c0 = c0
        self.delta = delta

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_features=1)
        if self.c0 < 0 or self.delta <= 0:
            raise ValueError("c0 must be >= 0 and delta > 0")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, copy=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        if np.any(X[:, -1] < 0):
            raise ValueError("cumulative costs must be nonnegative")
        X[:, -1] = budget_q_clip(X[:, -1], self.c0, self.delta)
        return X
