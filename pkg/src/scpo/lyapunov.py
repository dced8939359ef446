"""Lyapunov-function checks for stationary policies on absorbing CMDPs.

The constraint cost ``d`` is a per-state cost; terminal states are absorbing,
cost-free and carry ``L = 0``. Episodes end at the first hitting time of the
terminal set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cmdp import TabularCmdp


@dataclass(frozen=True)
class AbsorbingCmdp:
    transition: np.ndarray  # (X, A, X)
    cost: np.ndarray        # (X,) constraint cost d
    terminal: np.ndarray    # (X,) bool
    initial_state: int = 0
    labels: tuple = ()

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        d = np.asarray(self.cost, dtype=float)
        term = np.asarray(self.terminal, dtype=bool)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or d.shape != (P.shape[0],) or term.shape != d.shape:
            raise ValueError("inconsistent absorbing CMDP shapes")
        if np.any(np.abs(P.sum(axis=2) - 1) > 1e-12) or np.any(P < 0):
            raise ValueError("transition rows must be distributions")
        if np.any(d < 0):
            raise ValueError("constraint costs must be nonnegative")
        if not term.any():
            raise ValueError("at least one terminal state is required")
        for x in np.nonzero(term)[0]:
            if d[x] != 0 or np.any(P[x, :, x] != 1):
                raise ValueError(f"terminal state {x} must be absorbing and cost-free")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "cost", d)
        object.__setattr__(self, "terminal", term)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def is_deterministic(self) -> bool:
        return bool(np.all((self.transition == 0) | (self.transition == 1)))


def with_termination(cmdp: TabularCmdp, p_term: float = 0.2) -> AbsorbingCmdp:
    """Append an absorbing terminal reached with probability ``p_term`` from every step."""
    if not 0 < p_term <= 1:
        raise ValueError("p_term must lie in (0, 1]")
    S, A = cmdp.n_states, cmdp.n_actions
    P = np.zeros((S + 1, A, S + 1))
    P[:S, :, :S] = (1 - p_term) * cmdp.transition
    P[:S, :, S] = p_term
    P[S, :, S] = 1.0
    d = np.append(cmdp.cost, 0.0)
    term = np.zeros(S + 1, dtype=bool)
    term[S] = True
    return AbsorbingCmdp(P, d, term, cmdp.initial_state)


def unroll_augmented(cmdp: TabularCmdp):
    """Deterministic-time unrolling over ``(t, s, q)`` with an absorbing terminal after the horizon.

    Returns ``(absorbing_cmdp, keys)`` where ``keys[i] = (t, s, q)`` for every
    non-terminal index ``i``; the terminal is the last index.
    """
    start = (0, cmdp.initial_state, float(cmdp.cost[cmdp.initial_state]))
    keys, index, frontier = [start], {start: 0}, [start]
    edges = []
    while frontier:
        nxt = []
        for key in frontier:
            t, s, q = key
            if t + 1 >= cmdp.horizon_T:
                continue
            for a in range(cmdp.n_actions):
                for s2 in np.nonzero(cmdp.transition[s, a])[0]:
                    k2 = (t + 1, int(s2), q + float(cmdp.cost[s2]))
                    if k2 not in index:
                        index[k2] = len(keys)
                        keys.append(k2)
                        nxt.append(k2)
                    edges.append((index[key], a, index[k2], cmdp.transition[s, a, s2]))
        frontier = nxt
    X = len(keys) + 1
    P = np.zeros((X, cmdp.n_actions, X))
    for i, a, j, p in edges:
        P[i, a, j] += p
    for i, (t, _, _) in enumerate(keys):
        if t + 1 >= cmdp.horizon_T:
            P[i, :, X - 1] = 1.0
    P[X - 1, :, X - 1] = 1.0
    d = np.array([cmdp.cost[s] for _, s, _ in keys] + [0.0])
    term = np.zeros(X, dtype=bool)
    term[-1] = True
    return AbsorbingCmdp(P, d, term, 0, tuple(keys) + ("terminal",)), keys


def policy_on_unrolled(policy, keys, cmdp: TabularCmdp) -> np.ndarray:
    """Tabulate an augmented-state policy on the unrolled index set (terminal gets uniform)."""
    rows = [np.asarray(policy.probs(s, cmdp.q_clip(q), t), dtype=float) for t, s, q in keys]
    rows.append(np.full(cmdp.n_actions, 1.0 / cmdp.n_actions))
    return np.array(rows)


def _table(policy, n_states) -> np.ndarray:
    table = getattr(policy, "table", policy)
    table = np.asarray(table, dtype=float)
    if table.shape[0] != n_states or table.ndim != 2:
        raise ValueError("policy must be an (n_states, n_actions) table")
    return table


def bellman_apply(cmdp: AbsorbingCmdp, policy, h, V) -> np.ndarray:
    """``T_{pi,h}[V](x) = sum_a pi(a|x) [h(x, a) + sum_x' P(x'|x, a) V(x')]``; zero on terminals."""
    pi = _table(policy, cmdp.n_states)
    h = np.broadcast_to(np.asarray(h, dtype=float), pi.shape)
    V = np.asarray(V, dtype=float)
    out = np.sum(pi * (h + cmdp.transition @ V), axis=1)
    return np.where(cmdp.terminal, 0.0, out)


def state_cost(cmdp: AbsorbingCmdp) -> np.ndarray:
    """Constraint cost as an (X, A) array: ``d(x)`` for every action."""
    return np.repeat(cmdp.cost[:, None], cmdp.n_actions, axis=1)


def expected_cumulative_cost(cmdp: AbsorbingCmdp, policy) -> np.ndarray:
    """``D_pi(x)``: expected constraint cost until the terminal set is hit."""
    pi = _table(policy, cmdp.n_states)
    Ppi = np.einsum("xa,xay->xy", pi, cmdp.transition)
    tr = ~cmdp.terminal
    M = np.eye(tr.sum()) - Ppi[np.ix_(tr, tr)]
    D = np.zeros(cmdp.n_states)
    try:
        D[tr] = np.linalg.solve(M, cmdp.cost[tr])
    except np.linalg.LinAlgError as err:
        raise ValueError("the terminal set is not reached with probability one under this policy") from err
    return D


@dataclass(frozen=True)
class LyapunovCandidate:
    values: np.ndarray
    terminal: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        term = np.asarray(self.terminal, dtype=bool)
        if v.shape != term.shape:
            raise ValueError("values and terminal mask must align")
        if np.any(v < 0):
            raise ValueError("Lyapunov values must be nonnegative")
        v = np.where(term, 0.0, v)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "terminal", term)

    @classmethod
    def of(cls, cmdp: AbsorbingCmdp, values) -> "LyapunovCandidate":
        return cls(values, cmdp.terminal)


@dataclass(frozen=True)
class MembershipCheck:
    ok: bool
    witness: int | None = None
    reason: str = ""

    def __bool__(self):
        return self.ok


def is_lyapunov(cmdp: AbsorbingCmdp, pi_B, candidate: LyapunovCandidate, x0: int, d0: float,
                tol: float = 1e-10) -> MembershipCheck:
    L = candidate.values
    if np.any(L < -tol):
        x = int(np.argmin(L))
        return MembershipCheck(False, x, "negative value")
    bad_term = np.nonzero(cmdp.terminal & (np.abs(L) > tol))[0]
    if len(bad_term):
        return MembershipCheck(False, int(bad_term[0]), "nonzero on terminal state")
    TL = bellman_apply(cmdp, pi_B, state_cost(cmdp), L)
    excess = np.where(cmdp.terminal, -np.inf, TL - L)
    if np.max(excess) > tol:
        x = int(np.argmax(excess))
        return MembershipCheck(False, x, f"operator exceeds L by {excess[x]:.3g}")
    if L[x0] > d0 + tol:
        return MembershipCheck(False, int(x0), f"L(x0) = {L[x0]:.6g} exceeds d0 = {d0}")
    return MembershipCheck(True)


def induced_set_violations(cmdp: AbsorbingCmdp, pi, L, bound=None, tol: float = 1e-10) -> np.ndarray:
    """States where ``T_{pi,d}[L](x) > bound(x)``; ``bound`` defaults to ``L``."""
    L = np.asarray(L, dtype=float)
    bound = L if bound is None else np.asarray(bound, dtype=float)
    TL = bellman_apply(cmdp, pi, state_cost(cmdp), L)
    return np.nonzero(~cmdp.terminal & (TL > bound + tol))[0]


def iterate_bellman(cmdp: AbsorbingCmdp, pi, L, n: int) -> list[np.ndarray]:
    """``[L, T[L], T^2[L], ..., T^n[L]]`` for the constraint cost."""
    out = [np.asarray(L, dtype=float)]
    d = state_cost(cmdp)
    for _ in range(n):
        out.append(bellman_apply(cmdp, pi, d, out[-1]))
    return out


def check_monotone_contraction(cmdp: AbsorbingCmdp, pi, candidate: LyapunovCandidate, k_max: int = 10) -> float:
    """Minimum slack of ``D_pi <= T^k[L] <= T^{k-1}[L] <= L`` for ``k <= k_max``."""
    seq = iterate_bellman(cmdp, pi, candidate.values, k_max)
    D = expected_cumulative_cost(cmdp, pi)
    slack = np.inf
    for k in range(1, k_max + 1):
        slack = min(slack, np.min(seq[k - 1] - seq[k]), np.min(seq[0] - seq[k]), np.min(seq[k] - D))
    return float(slack)


def state_marginals(cmdp: AbsorbingCmdp, pi, x0: int, n_steps: int) -> np.ndarray:
    """``P[X_t = x | X_0 = x0]`` for ``t = 0..n_steps`` as rows."""
    P = np.einsum("xa,xay->xy", _table(pi, cmdp.n_states), cmdp.transition)
    mu = np.zeros(cmdp.n_states)
    mu[x0] = 1.0
    rows = [mu]
    for _ in range(n_steps):
        mu = mu @ P
        rows.append(mu)
    return np.array(rows)


def check_upper_bound_lemma(cmdp: AbsorbingCmdp, pi, candidate: LyapunovCandidate, T_max: int = 10,
                            x0: int | None = None) -> float:
    """Minimum over ``T <= T_max`` of ``L(x0) - sum_{t<=T} E[d(X_t)] - E[L(X_{T+1})]``."""
    x0 = cmdp.initial_state if x0 is None else x0
    L = candidate.values
    mu = state_marginals(cmdp, pi, x0, T_max + 1)
    running = np.cumsum(mu[:-1] @ cmdp.cost)
    slacks = L[x0] - running - mu[1:] @ L
    return float(slacks.min())


def check_occupancy_bound(cmdp: AbsorbingCmdp, pi, candidate: LyapunovCandidate, d0: float,
                          T_max: int = 50, x0: int | None = None) -> float:
    """Minimum of ``d0 - P[X_t = x] L(x)`` over states and ``t <= T_max``."""
    x0 = cmdp.initial_state if x0 is None else x0
    mu = state_marginals(cmdp, pi, x0, T_max)
    return float(d0 - np.max(mu * candidate.values[None, :]))


def reachable_states(cmdp: AbsorbingCmdp, pi, x0: int) -> np.ndarray:
    P = np.einsum("xa,xay->xy", _table(pi, cmdp.n_states), cmdp.transition)
    seen = np.zeros(cmdp.n_states, dtype=bool)
    seen[x0] = True
    frontier = [x0]
    while frontier:
        x = frontier.pop()
        for y in np.nonzero(P[x] > 0)[0]:
            if not seen[y]:
                seen[y] = True
                frontier.append(int(y))
    return seen


def merge_on_trajectory(cmdp: AbsorbingCmdp, pi_star, pi_B, x0: int) -> np.ndarray:
    """``pi_1*``: ``pi*`` on states ``pi*`` reaches from ``x0``, ``pi_B`` elsewhere."""
    on = reachable_states(cmdp, pi_star, x0)
    return np.where(on[:, None], _table(pi_star, cmdp.n_states), _table(pi_B, cmdp.n_states))


@dataclass(frozen=True)
class RelaxedSetResult:
    ok: bool
    violations: tuple
    lyapunov: np.ndarray
    merged_policy: np.ndarray

    def __bool__(self):
        return self.ok


def relaxed_induced_set_check(cmdp: AbsorbingCmdp, pi_star, pi_B, d0: float, x0: int | None = None,
                              tol: float = 1e-10) -> RelaxedSetResult:
    """Check ``T_{pi_1*,d}[L](x) <= max(d0, L(x))`` everywhere with ``L = D_{pi_B}``."""
    if not cmdp.is_deterministic():
        raise ValueError("the relaxed-set check needs deterministic transitions")
    x0 = cmdp.initial_state if x0 is None else x0
    L = expected_cumulative_cost(cmdp, pi_B)
    if L[x0] > d0 + tol:
        raise ValueError(f"pi_B is infeasible: D(x0) = {L[x0]:.6g} > d0 = {d0}")
    merged = merge_on_trajectory(cmdp, pi_star, pi_B, x0)
    bad = relaxed_set_violations(cmdp, merged, L, d0, tol)
    return RelaxedSetResult(len(bad) == 0, tuple(int(x) for x in bad), L, merged)


def relaxed_set_violations(cmdp: AbsorbingCmdp, pi, L, d0: float, tol: float = 1e-10) -> np.ndarray:
    """States where ``T_{pi,d}[L](x) > max(d0, L(x))``."""
    L = np.asarray(L, dtype=float)
    return induced_set_violations(cmdp, pi, L, np.maximum(d0, L), tol)
