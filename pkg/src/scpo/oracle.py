"""Exact evaluation of safety, reward and surrogate quantities on small CMDPs.

Two independent routes are provided:

* :func:`enumerate_trajectories` expands every trajectory with its probability,
  and the ``exact_*`` functions take expectations over that distribution.
* :class:`PolicyEvaluator` runs memoized backward recursion over augmented
  states ``(t, s, q)``.

The theorem checks evaluate one side of each identity through enumeration and
the per-step quantities (``Q``, ``A``) through recursion, so the two routes
check each other.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cmdp import (
    DeterministicPolicy,
    QTablePolicy,
    Policy,
    TabularCmdp,
    TabularPolicy,
    Trajectory,
    check_distribution,
)

DEFAULT_MAX_LEAVES = 10**7
INDICATOR_TOL = 1e-9


class EnumerationBudgetError(RuntimeError):
    """Raised when exhaustive enumeration would exceed the leaf cap."""


def safety_weight(qc, k):
    """``qc ** k`` with ``0 ** 0 == 1`` and ``k = inf`` as the indicator ``qc == 1``."""
    qc = np.asarray(qc, dtype=float)
    if k == 0:
        return np.ones_like(qc)
    if math.isinf(k):
        return (np.abs(qc - 1.0) <= INDICATOR_TOL).astype(float)
    return qc ** k


@dataclass(frozen=True)
class EnumeratedDistribution:
    """Exact distribution over trajectories of a fixed length."""

    cmdp: TabularCmdp
    states: np.ndarray
    actions: np.ndarray
    cumulative_costs: np.ndarray
    probs: np.ndarray
    start_time: int = 0

    def __len__(self):
        return len(self.probs)

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    @property
    def flags(self) -> np.ndarray:
        return np.asarray(self.cmdp.flag(self.cumulative_costs))

    @property
    def safe(self) -> np.ndarray:
        return self.flags.prod(axis=1)

    @property
    def rewards(self) -> np.ndarray:
        return self.cmdp.reward[self.states, self.actions]

    @property
    def costs(self) -> np.ndarray:
        return self.cmdp.cost[self.states]

    @property
    def times(self) -> np.ndarray:
        return self.start_time + np.arange(self.horizon)

    def discounted(self, per_step: np.ndarray, gamma: float = 1.0) -> np.ndarray:
        return per_step @ (gamma ** np.arange(self.horizon))

    def expect(self, per_trajectory) -> float:
        return float(self.probs @ np.asarray(per_trajectory, dtype=float))

    def entries(self) -> list[tuple[Trajectory, float]]:
        return [
            (Trajectory.from_arrays(self.cmdp, s, a), float(p))
            for s, a, p in zip(self.states, self.actions, self.probs)
        ]

    def _step_keys(self, j, with_action):
        """Integer code per trajectory for the (s, q[, a]) tuple at step ``j``."""
        levels, q_idx = np.unique(self.cumulative_costs[:, j], return_inverse=True)
        code = self.states[:, j] * len(levels) + q_idx.ravel()
        if with_action:
            code = code * self.cmdp.n_actions + self.actions[:, j]
        uniq, first, inv = np.unique(code, return_index=True, return_inverse=True)
        return first, inv.ravel()

    def per_step(self, fn: Callable[[int, int, float, int], float]) -> np.ndarray:
        """Evaluate ``fn(t, s, q, a)`` at every visited step, once per distinct key."""
        out = np.empty(self.states.shape)
        for j in range(self.horizon):
            first, inv = self._step_keys(j, True)
            vals = np.array([fn(self.start_time + j, int(self.states[i, j]),
                                float(self.cumulative_costs[i, j]), int(self.actions[i, j])) for i in first])
            out[:, j] = vals[inv]
        return out

    def visited_states(self) -> set[tuple[int, int, float]]:
        keys = set()
        for j in range(self.horizon):
            first, _ = self._step_keys(j, False)
            keys.update((self.start_time + j, int(self.states[i, j]), float(self.cumulative_costs[i, j])) for i in first)
        return keys


def _policy_matrix(cmdp, policy, states, qs, t, cache):
    out = np.empty((len(states), cmdp.n_actions))
    keys = np.stack([states, qs], axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    rows = []
    for s, q in uniq:
        key = (t, int(s), float(q))
        if key not in cache:
            cache[key] = check_distribution(policy.probs(int(s), cmdp.q_clip(q), t), cmdp.n_actions)
        rows.append(cache[key])
    out[:] = np.asarray(rows)[inv.ravel()]
    return out


def enumerate_trajectories(
    cmdp: TabularCmdp,
    policy: Policy,
    start_state: int | None = None,
    horizon: int | None = None,
    *,
    start_q: float | None = None,
    start_time: int = 0,
    first_action: int | None = None,
    max_leaves: int = DEFAULT_MAX_LEAVES,
) -> EnumeratedDistribution:
    """Expand every positive-probability trajectory from ``start_state``.

    ``horizon`` defaults to the steps remaining after ``start_time``.
    ``start_q`` is the cumulative cost at the start state and defaults to that
    state's own cost. Zero-probability branches are pruned; the number of live
    trajectories is checked against ``max_leaves`` after every expansion.
    """
    s0 = cmdp.initial_state if start_state is None else int(start_state)
    H = cmdp.horizon_T - start_time if horizon is None else int(horizon)
    if H < 1:
        raise ValueError("horizon must be >= 1")
    q0 = float(cmdp.cost[s0]) if start_q is None else float(start_q)

    states = np.array([[s0]], dtype=np.int64)
    qs = np.array([[q0]])
    actions = np.empty((1, 0), dtype=np.int64)
    probs = np.ones(1)
    cache: dict = {}
    P = cmdp.transition

    for j in range(H):
        t = start_time + j
        if j == 0 and first_action is not None:
            pa = np.zeros((len(probs), cmdp.n_actions))
            pa[:, first_action] = 1.0
        else:
            pa = _policy_matrix(cmdp, policy, states[:, -1], qs[:, -1], t, cache)
        r_idx, a_idx = np.nonzero(pa > 0)
        if len(r_idx) > max_leaves:
            raise EnumerationBudgetError(f"enumeration exceeds {max_leaves} leaves at step {j}")
        probs = probs[r_idx] * pa[r_idx, a_idx]
        states, qs = states[r_idx], qs[r_idx]
        actions = np.concatenate([actions[r_idx], a_idx[:, None]], axis=1)
        if j + 1 < H:
            nxt = P[states[:, -1], actions[:, -1]]
            r_idx, s_idx = np.nonzero(nxt > 0)
            if len(r_idx) > max_leaves:
                raise EnumerationBudgetError(f"enumeration exceeds {max_leaves} leaves at step {j}")
            probs = probs[r_idx] * nxt[r_idx, s_idx]
            states = np.concatenate([states[r_idx], s_idx[:, None]], axis=1)
            qs = np.concatenate([qs[r_idx], (qs[r_idx, -1] + cmdp.cost[s_idx])[:, None]], axis=1)
            actions = actions[r_idx]

    return EnumeratedDistribution(cmdp, states, actions, qs, probs, start_time)


# --------------------------------------------------------------------------
# Definitional values via enumeration
# --------------------------------------------------------------------------

def _start(cmdp, s, q):
    s = cmdp.initial_state if s is None else int(s)
    return s, (float(cmdp.cost[s]) if q is None else float(q))


def _unit(p: float) -> float:
    # leaf sums can overshoot 1 by a few ulps
    return min(max(p, 0.0), 1.0)


def exact_Vc(cmdp, policy, s=None, *, q=None, t=0, max_leaves=DEFAULT_MAX_LEAVES) -> float:
    """Probability of a safe trajectory from augmented state ``(s, q)`` at time ``t``."""
    s, q = _start(cmdp, s, q)
    dist = enumerate_trajectories(cmdp, policy, s, start_q=q, start_time=t, max_leaves=max_leaves)
    return _unit(dist.expect(dist.safe))


def exact_Qc(cmdp, policy, s, a, *, q=None, t=0, max_leaves=DEFAULT_MAX_LEAVES) -> float:
    s, q = _start(cmdp, s, q)
    dist = enumerate_trajectories(cmdp, policy, s, start_q=q, start_time=t, first_action=a,
                                  max_leaves=max_leaves)
    return _unit(dist.expect(dist.safe))


def exact_V(cmdp, policy, s=None, *, gamma=1.0, q=None, t=0, first_action=None) -> float:
    """Plain expected discounted return."""
    s, q = _start(cmdp, s, q)
    dist = enumerate_trajectories(cmdp, policy, s, start_q=q, start_time=t, first_action=first_action)
    return dist.expect(dist.discounted(dist.rewards, gamma))


class QcTable:
    """Memoized ``Q^c_t(s, q, a)`` computed by enumeration."""

    def __init__(self, cmdp: TabularCmdp, policy: Policy):
        self.cmdp, self.policy = cmdp, policy
        self._memo: dict = {}

    def __call__(self, t, s, q, a) -> float:
        key = (t, s, q, a)
        if key not in self._memo:
            self._memo[key] = exact_Qc(self.cmdp, self.policy, s, a, q=q, t=t)
        return self._memo[key]


def _rc_step(cmdp, qc, k, beta):
    def g(t, s, q, a):
        w = float(safety_weight(qc(t, s, q, a), k))
        return cmdp.reward[s, a] * w - beta * (1.0 - w) * cmdp.cost[s]
    return g


def exact_Vrc_k(cmdp, policy, s=None, k=1, beta=0.0, *, gamma=1.0, q=None, t=0,
                first_action=None, qc: QcTable | None = None) -> float:
    """``E[sum gamma^t (r Q^c^k - beta (1 - Q^c^k) c)]`` by enumeration."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    s, q = _start(cmdp, s, q)
    qc = qc or QcTable(cmdp, policy)
    dist = enumerate_trajectories(cmdp, policy, s, start_q=q, start_time=t, first_action=first_action)
    return dist.expect(dist.discounted(dist.per_step(_rc_step(cmdp, qc, k, beta)), gamma))


def exact_Qrc_k(cmdp, policy, s, a, k=1, beta=0.0, **kw) -> float:
    return exact_Vrc_k(cmdp, policy, s, k, beta, first_action=a, **kw)


def exact_Arc_k(cmdp, policy, s, a, k=1, beta=0.0, **kw) -> float:
    qc = kw.pop("qc", None) or QcTable(cmdp, policy)
    return (exact_Qrc_k(cmdp, policy, s, a, k, beta, qc=qc, **kw)
            - exact_Vrc_k(cmdp, policy, s, k, beta, qc=qc, **kw))


def exact_Vr_k(cmdp, policy, s=None, k=1, **kw) -> float:
    return exact_Vrc_k(cmdp, policy, s, k, 0.0, **kw)


def exact_Qr_k(cmdp, policy, s, a, k=1, **kw) -> float:
    return exact_Qrc_k(cmdp, policy, s, a, k, 0.0, **kw)


def exact_Ar_k(cmdp, policy, s, a, k=1, **kw) -> float:
    return exact_Arc_k(cmdp, policy, s, a, k, 0.0, **kw)


def exact_expected_cost(cmdp, policy, s=None, *, gamma=1.0) -> float:
    s, q = _start(cmdp, s, None)
    dist = enumerate_trajectories(cmdp, policy, s, start_q=q)
    return dist.expect(dist.discounted(dist.costs, gamma))


# --------------------------------------------------------------------------
# Recursion
# --------------------------------------------------------------------------

class PolicyEvaluator:
    """Backward recursion over augmented states ``(t, s, q)`` for a fixed policy.

    Per-step payoffs are selected by key: ``"reward"``, ``"cost"``,
    ``("rk", k)`` or ``("rck", k, beta)``; the latter two weight rewards with
    this policy's own ``Q^c``.
    """

    def __init__(self, cmdp: TabularCmdp, policy: Policy, gamma: float = 1.0):
        self.cmdp, self.policy, self.gamma = cmdp, policy, float(gamma)
        self._pi: dict = {}
        self._vc: dict = {}
        self._v: dict = {}

    def probs(self, t, s, q) -> np.ndarray:
        key = (t, s, q)
        if key not in self._pi:
            self._pi[key] = check_distribution(
                self.policy.probs(s, self.cmdp.q_clip(q), t), self.cmdp.n_actions)
        return self._pi[key]

    def _successors(self, s, a, q):
        P = self.cmdp.transition[s, a]
        for s2 in np.nonzero(P)[0]:
            yield int(s2), float(P[s2]), q + float(self.cmdp.cost[s2])

    def qc(self, t, s, q, a) -> float:
        if not self.cmdp.flag(q):
            return 0.0
        if t == self.cmdp.horizon_T - 1:
            return 1.0
        return sum(p * self.vc(t + 1, s2, q2) for s2, p, q2 in self._successors(s, a, q))

    def vc(self, t, s, q) -> float:
        key = (t, s, q)
        if key not in self._vc:
            pi = self.probs(t, s, q)
            self._vc[key] = float(sum(pi[a] * self.qc(t, s, q, a) for a in np.nonzero(pi)[0]))
        return self._vc[key]

    def payoff(self, which, t, s, q, a) -> float:
        c = self.cmdp
        if which == "reward":
            return float(c.reward[s, a])
        if which == "cost":
            return float(c.cost[s])
        kind, k, *rest = which
        w = float(safety_weight(self.qc(t, s, q, a), k))
        beta = rest[0] if kind == "rck" else 0.0
        return c.reward[s, a] * w - beta * (1.0 - w) * c.cost[s]

    def q_value(self, which, t, s, q, a) -> float:
        val = self.payoff(which, t, s, q, a)
        if t < self.cmdp.horizon_T - 1:
            val += self.gamma * sum(p * self.value(which, t + 1, s2, q2)
                                    for s2, p, q2 in self._successors(s, a, q))
        return val

    def value(self, which, t, s, q) -> float:
        key = (which, t, s, q)
        if key not in self._v:
            pi = self.probs(t, s, q)
            self._v[key] = float(sum(pi[a] * self.q_value(which, t, s, q, a) for a in np.nonzero(pi)[0]))
        return self._v[key]

    def advantage(self, which, t, s, q, a) -> float:
        return self.q_value(which, t, s, q, a) - self.value(which, t, s, q)


# --------------------------------------------------------------------------
# Identity and bound checks
# --------------------------------------------------------------------------

def _ratio(num: float, den: float) -> float:
    if den <= 0:
        raise ValueError("policy ratio undefined: zero-probability denominator on a visited action")
    return num / den


def _require_support(ev_num, ev_den, keys, n_actions):
    """``ev_den`` must be positive wherever ``ev_num`` is, on the given states."""
    for t, s, q in keys:
        p_num, p_den = ev_num.probs(t, s, q), ev_den.probs(t, s, q)
        if np.any((p_den <= 0) & (p_num > 0)):
            raise ValueError(f"policy ratio undefined at augmented state (t={t}, s={s}, q={q})")


def check_policy_difference_identity(cmdp, pi, pi_prime, s=None, gamma=1.0, form="reward") -> float:
    """Residual of the exact policy-difference identity.

    ``form="reward"``: ``V_pi'(s) - V_pi(s) = E_pi'[sum g^t (1 - pi/pi') Q_pi]``.
    ``form="cost"``: the safety version with ``V^c``/``Q^c`` (undiscounted).
    """
    s, q = _start(cmdp, s, None)
    ev = PolicyEvaluator(cmdp, pi, gamma)
    ev_p = PolicyEvaluator(cmdp, pi_prime, gamma)
    dist_p = enumerate_trajectories(cmdp, pi_prime, s, start_q=q)
    dist = enumerate_trajectories(cmdp, pi, s, start_q=q)
    _require_support(ev, ev_p, dist_p.visited_states(), cmdp.n_actions)

    if form == "reward":
        lhs = dist_p.expect(dist_p.discounted(dist_p.rewards, gamma)) - dist.expect(dist.discounted(dist.rewards, gamma))
        qf = lambda t, s_, q_, a: ev.q_value("reward", t, s_, q_, a)
        g = gamma
    elif form == "cost":
        lhs = dist_p.expect(dist_p.safe) - dist.expect(dist.safe)
        qf = ev.qc
        g = 1.0
    else:
        raise ValueError(f"unknown form {form!r}")

    def term(t, s_, q_, a):
        return (1.0 - _ratio(ev.probs(t, s_, q_)[a], ev_p.probs(t, s_, q_)[a])) * qf(t, s_, q_, a)

    rhs = dist_p.expect(dist_p.discounted(dist_p.per_step(term), g))
    return abs(lhs - rhs)


def check_advantage_substitution(cmdp, pi, pi_prime, s=None, gamma=1.0) -> float:
    """Residual of swapping ``Q_pi`` for ``A_pi`` inside the ``pi'`` expectation."""
    s, q = _start(cmdp, s, None)
    ev, ev_p = PolicyEvaluator(cmdp, pi, gamma), PolicyEvaluator(cmdp, pi_prime, gamma)
    dist_p = enumerate_trajectories(cmdp, pi_prime, s, start_q=q)
    _require_support(ev, ev_p, dist_p.visited_states(), cmdp.n_actions)

    def weight(t, s_, q_, a):
        return 1.0 - _ratio(ev.probs(t, s_, q_)[a], ev_p.probs(t, s_, q_)[a])

    with_q = dist_p.per_step(lambda t, s_, q_, a: weight(t, s_, q_, a) * ev.q_value("reward", t, s_, q_, a))
    with_a = dist_p.per_step(lambda t, s_, q_, a: weight(t, s_, q_, a) * ev.advantage("reward", t, s_, q_, a))
    return abs(dist_p.expect(dist_p.discounted(with_q, gamma)) - dist_p.expect(dist_p.discounted(with_a, gamma)))


def check_qc_bellman_identity(cmdp, policy, s, a, *, q=None, t=0) -> float:
    """Residual of ``Q^c(s, a) = sum_s' p(s'|s, a) V^c(s')``, both sides enumerated."""
    s, q = _start(cmdp, s, q)
    lhs = exact_Qc(cmdp, policy, s, a, q=q, t=t)
    if t == cmdp.horizon_T - 1:
        rhs = float(cmdp.flag(q))
    else:
        rhs = 0.0
        for s2 in np.nonzero(cmdp.transition[s, a])[0]:
            rhs += cmdp.transition[s, a, s2] * exact_Vc(cmdp, policy, int(s2), q=q + cmdp.cost[s2], t=t + 1)
    return abs(lhs - rhs)


def check_first_order_expansion(cmdp, pi, pi_prime, s=None, k=1, beta=0.0, gamma=1.0) -> float:
    """Residual of ``Vbar_pi'(s) = V_pi(s) + E_pi'[sum g^t A_pi]`` for the ``r Q^c^k`` payoff.

    ``Vbar_pi'`` evaluates ``pi'`` on the payoff weighted by ``pi``'s own safety
    critic; with ``beta > 0`` the cost-penalized payoff is used on both sides.
    """
    s, q = _start(cmdp, s, None)
    which = ("rck", k, beta)
    ev = PolicyEvaluator(cmdp, pi, gamma)
    qc = QcTable(cmdp, pi)
    step = _rc_step(cmdp, qc, k, beta)
    dist_p = enumerate_trajectories(cmdp, pi_prime, s, start_q=q)
    dist = enumerate_trajectories(cmdp, pi, s, start_q=q)
    vbar = dist_p.expect(dist_p.discounted(dist_p.per_step(step), gamma))
    v_pi = dist.expect(dist.discounted(dist.per_step(step), gamma))
    adv = dist_p.expect(dist_p.discounted(
        dist_p.per_step(lambda t, s_, q_, a: ev.advantage(which, t, s_, q_, a)), gamma))
    return abs(vbar - (v_pi + adv))


@dataclass(frozen=True)
class SurrogateBounds:
    slack_ratio: float
    slack_inverse: float
    alpha: float
    epsilon: float
    epsilon_prime: float
    truncation: float


def check_surrogate_bounds(cmdp, pi, pi_prime, s=None, gamma=0.9, k=None, beta=0.0) -> SurrogateBounds:
    """Slacks of the two lower bounds on the new policy's value.

    With ``k=None`` the plain return is bounded. Otherwise the bounded value is
    ``Vbar_pi'`` for the ``r Q^c_pi^k`` payoff and advantages are ``A^{r,k}_pi``.
    Slacks are ``value - bound + truncation`` where ``truncation`` is the
    allowance ``gamma^T max|A| / (1 - gamma)`` for the finite horizon.
    """
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    s, q = _start(cmdp, s, None)
    which = "reward" if k is None else ("rck", k, beta)
    ev, ev_p = PolicyEvaluator(cmdp, pi, gamma), PolicyEvaluator(cmdp, pi_prime, gamma)
    dist = enumerate_trajectories(cmdp, pi, s, start_q=q)
    dist_p = enumerate_trajectories(cmdp, pi_prime, s, start_q=q)
    keys = dist.visited_states() | dist_p.visited_states()
    _require_support(ev_p, ev, keys, cmdp.n_actions)
    _require_support(ev, ev_p, dist.visited_states(), cmdp.n_actions)

    alpha = eps = eps_p = max_adv = 0.0
    for t, s_, q_ in keys:
        p, p_new = ev.probs(t, s_, q_), ev_p.probs(t, s_, q_)
        alpha = max(alpha, 0.5 * float(np.abs(p_new - p).sum()))
        for a in range(cmdp.n_actions):
            A = ev.advantage(which, t, s_, q_, a)
            max_adv = max(max_adv, abs(A))
            if p[a] > 0:
                eps = max(eps, abs((p_new[a] / p[a] - 1.0) * A))
            if p_new[a] > 0:
                eps_p = max(eps_p, abs((1.0 - p[a] / p_new[a]) * A))

    payoff = dist_p.per_step(lambda t, s_, q_, a: ev.payoff(which, t, s_, q_, a))
    v_new = dist_p.expect(dist_p.discounted(payoff, gamma))
    v_old = ev.value(which, dist.start_time, s, q)
    sur1 = dist.expect(dist.discounted(dist.per_step(
        lambda t, s_, q_, a: (ev_p.probs(t, s_, q_)[a] / ev.probs(t, s_, q_)[a] - 1.0)
        * ev.advantage(which, t, s_, q_, a)), gamma))
    sur2 = dist.expect(dist.discounted(dist.per_step(
        lambda t, s_, q_, a: (1.0 - _ratio(ev.probs(t, s_, q_)[a], ev_p.probs(t, s_, q_)[a]))
        * ev.advantage(which, t, s_, q_, a)), gamma))
    scale = 2.0 * alpha * gamma / (1.0 - gamma) ** 2
    trunc = gamma ** cmdp.horizon_T * max_adv / (1.0 - gamma)
    return SurrogateBounds(
        slack_ratio=v_new - (v_old + sur1 - scale * eps) + trunc,
        slack_inverse=v_new - (v_old + sur2 - scale * eps_p) + trunc,
        alpha=alpha, epsilon=eps, epsilon_prime=eps_p, truncation=trunc,
    )


@dataclass(frozen=True)
class GradientCheck:
    max_dev_q_form: float
    max_dev_a_form: float
    q_vs_a: float


def check_gradient_identity(cmdp, logits, s=None, fd_step=1e-5) -> GradientCheck:
    """Compare score-function gradients of ``V^c`` with central finite differences.

    The policy is a tabular softmax over base states with parameters ``logits``.
    """
    logits = np.asarray(logits, dtype=float)
    s, q = _start(cmdp, s, None)
    policy = TabularPolicy.from_logits(logits)
    pi = policy.table
    qc = QcTable(cmdp, policy)
    dist = enumerate_trajectories(cmdp, policy, s, start_q=q)
    qvals = dist.per_step(qc)
    vvals = dist.per_step(lambda t, s_, q_, a: sum(pi[s_, b] * qc(t, s_, q_, b) for b in range(cmdp.n_actions)))

    grad_q = np.zeros_like(logits)
    grad_a = np.zeros_like(logits)
    for j in range(dist.horizon):
        st, at = dist.states[:, j], dist.actions[:, j]
        score = -pi[st]
        score[np.arange(len(at)), at] += 1.0
        for w, g in ((qvals[:, j], grad_q), (qvals[:, j] - vvals[:, j], grad_a)):
            np.add.at(g, st, (dist.probs * w)[:, None] * score)

    fd = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += fd_step
        down[idx] -= fd_step
        fd[idx] = (exact_Vc(cmdp, TabularPolicy.from_logits(up), s, q=q)
                   - exact_Vc(cmdp, TabularPolicy.from_logits(down), s, q=q)) / (2 * fd_step)
    return GradientCheck(
        max_dev_q_form=float(np.abs(grad_q - fd).max()),
        max_dev_a_form=float(np.abs(grad_a - fd).max()),
        q_vs_a=float(np.abs(grad_q - grad_a).max()),
    )


# --------------------------------------------------------------------------
# Constrained dynamic programming and policy-grid search
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DpSolution:
    policy: DeterministicPolicy
    value: float
    expected_return: float
    expected_cost: float


def _cost_units(cmdp, grid):
    units = cmdp.cost / grid
    if np.any(np.abs(units - np.round(units)) > 1e-9):
        raise ValueError(
            f"costs {cmdp.cost.tolist()} are not multiples of the grid {grid}; "
            "quantize the costs onto a finite grid before solving"
        )
    return np.round(units).astype(int)


def constrained_dp_solve(cmdp: TabularCmdp, cost_grid: float = 1.0) -> DpSolution:
    """Return-maximizing deterministic augmented policy that is surely safe.

    Backward induction over ``(t, s, q)`` where ``q`` lives on ``cost_grid``.
    An action is admissible only if every successor remains feasible, so the
    resulting policy has ``f(tau) = 1`` on every trajectory. Ties pick the
    lowest action index.
    """
    units = _cost_units(cmdp, cost_grid)
    T, P, r = cmdp.horizon_T, cmdp.transition, cmdp.reward
    s0 = cmdp.initial_state
    layers = [{(s0, int(units[s0]))}]
    for _ in range(T - 1):
        nxt = set()
        for s, n in layers[-1]:
            for s2 in np.nonzero(P[s].sum(axis=0))[0]:
                nxt.add((int(s2), n + int(units[s2])))
        layers.append(nxt)

    best = [dict() for _ in range(T)]
    choice = {}
    for t in reversed(range(T)):
        for s, n in layers[t]:
            q = n * cost_grid
            if not cmdp.flag(q):
                best[t][(s, n)] = -math.inf
                continue
            vals = []
            for a in range(cmdp.n_actions):
                v = float(r[s, a])
                if t < T - 1:
                    succ = np.nonzero(P[s, a])[0]
                    nexts = [best[t + 1][(int(s2), n + int(units[s2]))] for s2 in succ]
                    if any(math.isinf(x) for x in nexts):
                        v = -math.inf
                    else:
                        v += float(sum(P[s, a, s2] * x for s2, x in zip(succ, nexts)))
                vals.append(v)
            a_star = int(np.argmax(vals))
            best[t][(s, n)] = vals[a_star]
            choice[(t, s, cmdp.q_clip(q))] = a_star

    value = best[0][(s0, int(units[s0]))]
    if math.isinf(value):
        raise ValueError("no surely-safe policy exists for this CMDP")
    policy = DeterministicPolicy(choice, cmdp.n_actions)
    ev = PolicyEvaluator(cmdp, policy)
    q0 = float(cmdp.cost[s0])
    return DpSolution(policy, value, ev.value("reward", 0, s0, q0), ev.value("cost", 0, s0, q0))


def unconstrained_dp_value(cmdp: TabularCmdp) -> float:
    """Optimal undiscounted return ignoring costs (finite-horizon backward induction)."""
    V = np.zeros(cmdp.n_states)
    for t in reversed(range(cmdp.horizon_T)):
        Q = cmdp.reward + (cmdp.transition @ V if t < cmdp.horizon_T - 1 else 0.0)
        V = Q.max(axis=1)
    return float(V[cmdp.initial_state])


def simplex_grid(n_actions: int, step: float = 0.01) -> np.ndarray:
    m = int(round(1.0 / step))
    pts = [c for c in itertools.product(range(m + 1), repeat=n_actions - 1) if sum(c) <= m]
    return np.array([list(c) + [m - sum(c)] for c in pts], dtype=float) / m


def decision_states(cmdp: TabularCmdp) -> list[int]:
    """States where the choice of action can change rewards or transitions."""
    out = []
    for s in range(cmdp.n_states):
        if not (np.allclose(cmdp.transition[s], cmdp.transition[s, 0]) and np.allclose(cmdp.reward[s], cmdp.reward[s, 0])):
            out.append(s)
    return out


def grid_policies(cmdp: TabularCmdp, step: float = 0.01, max_policies: int = 10**6):
    """Yield every stationary base-state policy on a probability grid.

    Only decision states are gridded; the remaining states use action 0.
    """
    free = decision_states(cmdp)
    grid = simplex_grid(cmdp.n_actions, step)
    if len(grid) ** len(free) > max_policies:
        raise ValueError(f"{len(grid) ** len(free)} grid policies exceed the cap {max_policies}")
    base = np.zeros((cmdp.n_states, cmdp.n_actions))
    base[:, 0] = 1.0
    for combo in itertools.product(range(len(grid)), repeat=len(free)):
        table = base.copy()
        for s, i in zip(free, combo):
            table[s] = grid[i]
        yield TabularPolicy(table)


def safe_return(cmdp, policy, s=None) -> float:
    """Expected return counted only on safe trajectories, ``E[R(tau) f(tau)]``."""
    s, q = _start(cmdp, s, None)
    dist = enumerate_trajectories(cmdp, policy, s, start_q=q)
    return dist.expect(dist.discounted(dist.rewards) * dist.safe)


def best_stationary_unaugmented(cmdp: TabularCmdp, step: float = 0.01):
    """Best grid policy that ignores the cumulative cost.

    Returns ``(policy, safe_return, surely_safe_return)`` where the last entry
    is the best return among grid policies with ``V^c = 1`` (``-inf`` if none).
    """
    best, best_val, best_sure = None, -math.inf, -math.inf
    for pol in grid_policies(cmdp, step):
        s, q = _start(cmdp, None, None)
        dist = enumerate_trajectories(cmdp, pol, s, start_q=q)
        ret = dist.discounted(dist.rewards)
        val = dist.expect(ret * dist.safe)
        if val > best_val:
            best, best_val = pol, val
        if dist.expect(dist.safe) >= 1 - 1e-12:
            best_sure = max(best_sure, dist.expect(ret))
    return best, best_val, best_sure


def augmented_state_space(cmdp: TabularCmdp) -> tuple[int, list[float]]:
    """Size of the ``(state, cumulative cost)`` product space and its cost levels.

    Levels are the cumulative costs reachable at any step under any policy.
    """
    seen, frontier = set(), {(cmdp.initial_state, float(cmdp.cost[cmdp.initial_state]))}
    levels = set()
    for _ in range(cmdp.horizon_T):
        levels.update(q for _, q in frontier)
        seen |= frontier
        nxt = set()
        for s, q in frontier:
            for s2 in np.nonzero(cmdp.transition[s].sum(axis=0))[0]:
                nxt.add((int(s2), q + float(cmdp.cost[s2])))
        frontier = nxt
    levels = sorted(levels)
    return cmdp.n_states * len(levels), levels


# --------------------------------------------------------------------------
# Seeded random batch and CSV reports
# --------------------------------------------------------------------------

MASTER_SEED = 20240601
REPORT_HEADER = ("check", "instance_seed", "value", "passed")


@dataclass(frozen=True)
class RandomInstance:
    seed: int
    cmdp: TabularCmdp
    pi: QTablePolicy
    pi_prime: QTablePolicy
    eta: float


def random_instance(seed: int, max_states: int = 4, max_actions: int = 3, max_horizon: int = 5) -> RandomInstance:
    """Small random CMDP plus a policy pair with common support.

    Transition rows are Dirichlet(1, ..., 1), rewards uniform on [0, 1], state
    costs in {0, 1}. Policies condition on the integer cost level, and
    ``pi' = (1 - eta) pi + eta * Dirichlet`` keeps every ratio finite.
    """
    rng = np.random.default_rng(seed)
    n_s = int(rng.integers(2, max_states + 1))
    n_a = int(rng.integers(2, max_actions + 1))
    horizon = int(rng.integers(2, max_horizon + 1))
    transition = rng.dirichlet(np.ones(n_s), size=(n_s, n_a))
    reward = rng.uniform(0.0, 1.0, size=(n_s, n_a))
    cost = rng.integers(0, 2, size=n_s).astype(float)
    c0 = float(rng.integers(1, 3))
    cmdp = TabularCmdp(transition, reward, cost, budget_c0=c0, horizon_T=horizon)
    n_levels = int(c0) + 2
    pi = rng.dirichlet(np.ones(n_a), size=(n_s, n_levels))
    eta = float(rng.uniform(0.05, 0.5))
    pi_p = (1 - eta) * pi + eta * rng.dirichlet(np.ones(n_a), size=(n_s, n_levels))
    return RandomInstance(seed, cmdp, QTablePolicy(pi, c0), QTablePolicy(pi_p, c0), eta)


def random_batch(n: int = 100, master_seed: int = MASTER_SEED, **kw) -> list[RandomInstance]:
    return [random_instance(master_seed + i, **kw) for i in range(n)]


@dataclass(frozen=True)
class CheckRow:
    check: str
    instance_seed: int
    value: float
    passed: bool

    def as_csv(self) -> str:
        return f"{self.check},{self.instance_seed},{self.value!r},{int(self.passed)}"


def residual_row(check, seed, residual, tol) -> CheckRow:
    return CheckRow(check, seed, float(residual), bool(residual < tol))


def slack_row(check, seed, slack, tol) -> CheckRow:
    return CheckRow(check, seed, float(slack), bool(slack >= -tol))


def report_csv(rows) -> str:
    lines = [",".join(REPORT_HEADER)] + [r.as_csv() for r in rows]
    return "\n".join(lines) + "\n"
