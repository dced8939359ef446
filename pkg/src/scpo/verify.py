"""Verification suites shared by the command line and the acceptance tests.

Every suite returns a list of :class:`~scpo.oracle.CheckRow`. A row's
``value`` is a residual (identity checks), a slack (bound checks, pass when
``>= -tol``) or a computed quantity compared against its reference. Fixture
rows use instance seed 0; batch rows use the instance's own seed.
"""

from __future__ import annotations

import math
import re

import numpy as np

from . import lyapunov as lyap
from . import nn
from .estimators import vc_gamma_targets
from .oracle import (
    INDICATOR_TOL,
    MASTER_SEED,
    CheckRow,
    PolicyEvaluator,
    best_stationary_unaugmented,
    check_advantage_substitution,
    check_first_order_expansion,
    check_gradient_identity,
    check_policy_difference_identity,
    check_qc_bellman_identity,
    check_surrogate_bounds,
    constrained_dp_solve,
    enumerate_trajectories,
    exact_Ar_k,
    exact_Arc_k,
    exact_Qc,
    exact_Vc,
    exact_Vr_k,
    grid_policies,
    random_batch,
    residual_row,
    slack_row,
)
from .toys import FIXTURES, parse_k
from .trainer import TrainConfig, init_state, policy_loss_and_grads, regression_loss_and_grads

SUITES = ("oracle", "theorems", "lyapunov", "toys", "gradcheck")
IDENTITY_TOL = 1e-9
SLACK_TOL = 1e-9
BOUND_GAMMA = 0.9
MONOTONE_KS = (0, 1, 2, 4, 8, math.inf)

_LABEL = re.compile(r"^(?P<q>Qc|Ar\w+)\((?P<s>s0),(?P<a>\w+)\)$")


def _value_row(check, value, expected, tol) -> CheckRow:
    return CheckRow(check, 0, float(value), bool(abs(value - expected) <= tol))


# --------------------------------------------------------------------------
# Toy fixtures
# --------------------------------------------------------------------------

def evaluate_label(fixture, label: str) -> float:
    """Oracle value for an expected-value label such as ``"Ar4(s0,a0)"``."""
    cmdp, pol = fixture.cmdp, fixture.reference_policy
    if label == "max_Vc(s0)":
        return max(exact_Vc(cmdp, p) for p in grid_policies(cmdp, 0.01))
    if label in ("dp_return", "dp_cost"):
        sol = constrained_dp_solve(cmdp)
        return sol.expected_return if label == "dp_return" else sol.expected_cost
    if label == "augmented_states":
        from .oracle import augmented_state_space
        return float(augmented_state_space(cmdp)[0])
    m = _LABEL.match(label)
    if m is None:
        raise KeyError(f"unrecognised label {label!r}")
    a = fixture.action_names.index(m["a"])
    if m["q"] == "Qc":
        return exact_Qc(cmdp, pol, cmdp.initial_state, a)
    return exact_Ar_k(cmdp, pol, cmdp.initial_state, a, parse_k(label))


def suite_toys() -> list[CheckRow]:
    rows = []
    for name, build in FIXTURES.items():
        fx = build()
        for ev in fx.expected_values:
            rows.append(_value_row(f"{name}:{ev.label}", evaluate_label(fx, ev.label), ev.value, ev.tol))
    fx = FIXTURES["equal_safety"]()
    cmdp, pol = fx.cmdp, fx.reference_policy
    hi, lo = fx.metadata["high_cost_action"], fx.metadata["low_cost_action"]
    for k in (0, 1, 4):
        gap = abs(exact_Ar_k(cmdp, pol, 0, hi, k) - exact_Ar_k(cmdp, pol, 0, lo, k))
        rows.append(residual_row(f"equal_safety:Ar{k}_gap", 0, gap, 1e-9))
    pref = exact_Arc_k(cmdp, pol, 0, lo, k=1, beta=1.0) - exact_Arc_k(cmdp, pol, 0, hi, k=1, beta=1.0)
    rows.append(CheckRow("equal_safety:Arc1_beta1_low_minus_high", 0, float(pref), bool(pref > 0)))
    return rows


# --------------------------------------------------------------------------
# Oracle: safety values, monotonicity, stability, augmentation, estimator bound
# --------------------------------------------------------------------------

def _monotone_slack(cmdp, policy) -> float:
    vals = [exact_Vr_k(cmdp, policy, None, k) for k in MONOTONE_KS]
    return float(min(a - b for a, b in zip(vals, vals[1:])))


def stability_rows() -> list[CheckRow]:
    """Every grid argmax of ``V^{r,inf}`` on the cancellation fixture is surely safe."""
    fx = FIXTURES["cancellation"]()
    cmdp = fx.cmdp
    scored = [(exact_Vr_k(cmdp, p, None, math.inf), p) for p in grid_policies(cmdp, 0.01)]
    best = max(v for v, _ in scored)
    argmax = [p for v, p in scored if v >= best - 1e-12]
    worst = min(exact_Vc(cmdp, p) for p in argmax)
    return [CheckRow("stability:min_Vc_over_argmax", 0, worst, bool(worst >= 1 - INDICATOR_TOL)),
            CheckRow("stability:n_argmax", 0, float(len(argmax)), len(argmax) >= 1)]


def augmentation_rows() -> list[CheckRow]:
    fx = FIXTURES["gated_chain"]()
    sol = constrained_dp_solve(fx.cmdp)
    _, best_safe, best_sure = best_stationary_unaugmented(fx.cmdp, 0.01)
    c0 = fx.cmdp.budget_c0
    return [
        CheckRow("augmentation:dp_return", 0, sol.expected_return, abs(sol.expected_return - 5.0) <= 1e-12),
        CheckRow("augmentation:dp_cost", 0, sol.expected_cost, sol.expected_cost == c0),
        CheckRow("augmentation:stationary_safe_return", 0, best_safe, bool(best_safe < sol.expected_return)),
        CheckRow("augmentation:stationary_surely_safe_return", 0, best_sure, bool(best_sure < sol.expected_return)),
    ]


def estimator_bound_rows(n: int = 10**5, horizon: int = 64, seed: int = MASTER_SEED) -> list[CheckRow]:
    """Fuzzed nonincreasing flag sequences give targets in [0, 1]; all-safe gives 1."""
    rng = np.random.default_rng(seed)
    first_unsafe = rng.integers(0, horizon + 1, size=n)
    flags = (np.arange(horizon)[None, :] < first_unsafe[:, None]).astype(int)
    rows = []
    for g in (0.9, 0.99, 0.995, 1.0):
        v = vc_gamma_targets(flags, g)
        lo, hi = float(v.min()), float(v.max())
        rows.append(CheckRow(f"vc_targets:min:g{g}", seed, lo, lo >= 0.0))
        rows.append(CheckRow(f"vc_targets:max:g{g}", seed, hi, hi <= 1.0))
        safe = v[first_unsafe == horizon]
        dev = float(np.abs(safe - 1.0).max()) if safe.size else 0.0
        rows.append(CheckRow(f"vc_targets:all_safe_equals_one:g{g}", seed, dev, dev == 0.0))
    return rows


def suite_oracle(n_instances: int = 100, master_seed: int = MASTER_SEED) -> list[CheckRow]:
    rows = []
    fixtures = {name: build() for name, build in FIXTURES.items()}
    canc, part = fixtures["cancellation"], fixtures["partial_safety"]
    for a, want in ((0, 0.5), (1, 1.0)):
        got = exact_Qc(canc.cmdp, canc.reference_policy, 0, a)
        rows.append(CheckRow(f"safety:cancellation_Qc_a{a}", 0, got, got == want))
    best = evaluate_label(part, "max_Vc(s0)")
    rows.append(_value_row("safety:partial_safety_max_Vc", best, 0.7, 1e-9))
    for name, fx in fixtures.items():
        dist = enumerate_trajectories(fx.cmdp, fx.reference_policy)
        rows.append(residual_row(f"normalization:{name}", 0, abs(dist.probs.sum() - 1.0), 1e-12))
        rows.append(slack_row(f"monotone_rk:{name}", 0, _monotone_slack(fx.cmdp, fx.reference_policy), 1e-12))
    for inst in random_batch(n_instances, master_seed):
        rows.append(slack_row("monotone_rk:random", inst.seed, _monotone_slack(inst.cmdp, inst.pi), 1e-12))
    rows += stability_rows()
    rows += augmentation_rows()
    rows += estimator_bound_rows(seed=master_seed)
    return rows


# --------------------------------------------------------------------------
# Theorem batch
# --------------------------------------------------------------------------

def theorem_rows(inst, gamma: float = BOUND_GAMMA) -> list[CheckRow]:
    c, p, pp, seed = inst.cmdp, inst.pi, inst.pi_prime, inst.seed
    rows = [
        residual_row("policy_difference:reward", seed, check_policy_difference_identity(c, p, pp, gamma=gamma), IDENTITY_TOL),
        residual_row("policy_difference:cost", seed,
                     check_policy_difference_identity(c, p, pp, gamma=1.0, form="cost"), IDENTITY_TOL),
        residual_row("advantage_substitution", seed, check_advantage_substitution(c, p, pp, gamma=gamma), 1e-10),
    ]
    qc_res = max(check_qc_bellman_identity(c, p, s, a) for s in range(c.n_states) for a in range(c.n_actions))
    rows.append(residual_row("qc_bellman", seed, qc_res, 1e-10))
    for k in (1, 4):
        rows.append(residual_row(f"first_order_expansion:k{k}", seed,
                                 check_first_order_expansion(c, p, pp, k=k, gamma=gamma), IDENTITY_TOL))
    plain = check_surrogate_bounds(c, p, pp, gamma=gamma)
    rk = check_surrogate_bounds(c, p, pp, gamma=gamma, k=2)
    rows += [
        slack_row("surrogate_bound:ratio", seed, plain.slack_ratio, SLACK_TOL),
        slack_row("surrogate_bound:inverse_ratio", seed, plain.slack_inverse, SLACK_TOL),
        slack_row("surrogate_bound_rk:ratio", seed, rk.slack_ratio, SLACK_TOL),
        slack_row("surrogate_bound_rk:inverse_ratio", seed, rk.slack_inverse, SLACK_TOL),
    ]
    return rows


def suite_theorems(n_instances: int = 100, master_seed: int = MASTER_SEED) -> list[CheckRow]:
    rows = []
    for inst in random_batch(n_instances, master_seed):
        rows += theorem_rows(inst)
    return rows


# --------------------------------------------------------------------------
# Lyapunov batch
# --------------------------------------------------------------------------

def _level0_table(inst) -> np.ndarray:
    n_a = inst.cmdp.n_actions
    return np.vstack([inst.pi.table[:, 0, :], np.full(n_a, 1.0 / n_a)])


def lyapunov_rows(inst, p_term: float = 0.2, inflation=(0.0, 0.1), T_max: int = 10) -> list[CheckRow]:
    """Candidates are ``D_pi`` for the cost ``d + eps`` on non-terminal states."""
    ac = lyap.with_termination(inst.cmdp, p_term)
    pi = _level0_table(inst)
    x0 = ac.initial_state
    rows = []
    for eps in inflation:
        inflated = lyap.AbsorbingCmdp(ac.transition, ac.cost + eps * ~ac.terminal, ac.terminal, x0)
        cand = lyap.LyapunovCandidate.of(ac, lyap.expected_cumulative_cost(inflated, pi))
        d0 = float(cand.values[x0])
        member = lyap.is_lyapunov(ac, pi, cand, x0, d0)
        tag = f"eps{eps:g}"
        rows.append(CheckRow(f"lyapunov_membership:{tag}", inst.seed, 1.0 if member else 0.0, member.ok))
        rows.append(slack_row(f"monotone_contraction:{tag}", inst.seed,
                              lyap.check_monotone_contraction(ac, pi, cand, 10), SLACK_TOL))
        rows.append(slack_row(f"upper_bound_finite_T:{tag}", inst.seed,
                              lyap.check_upper_bound_lemma(ac, pi, cand, T_max, x0), SLACK_TOL))
        rows.append(slack_row(f"occupancy_bound:{tag}", inst.seed,
                              lyap.check_occupancy_bound(ac, pi, cand, d0, 50, x0), SLACK_TOL))
    return rows


def relaxed_set_rows() -> list[CheckRow]:
    """Relaxed induced-set check on the unrolled gated chain, plus a counterexample."""
    fx = FIXTURES["gated_chain"]()
    cmdp = fx.cmdp
    ac, keys = lyap.unroll_augmented(cmdp)
    pi_star = lyap.policy_on_unrolled(constrained_dp_solve(cmdp).policy, keys, cmdp)
    leave = np.zeros_like(pi_star)
    leave[:, 0] = 1.0
    d0 = cmdp.budget_c0
    res = lyap.relaxed_induced_set_check(ac, pi_star, leave, d0)
    same = lyap.relaxed_induced_set_check(ac, leave, leave, d0)
    stay = np.zeros_like(pi_star)
    stay[:, 1] = 1.0
    bad = lyap.relaxed_set_violations(ac, stay, res.lyapunov, 1.0)
    return [
        CheckRow("relaxed_set:gated_chain_dp", 0, float(len(res.violations)), res.ok),
        CheckRow("relaxed_set:gated_chain_pi_B_only", 0, float(len(same.violations)), same.ok),
        CheckRow("relaxed_set:always_stay_counterexample", 0, float(len(bad)), len(bad) > 0),
    ]


def suite_lyapunov(n_instances: int = 100, master_seed: int = MASTER_SEED) -> list[CheckRow]:
    rows = []
    for inst in random_batch(n_instances, master_seed):
        rows += lyapunov_rows(inst)
    return rows + relaxed_set_rows()


# --------------------------------------------------------------------------
# Gradients
# --------------------------------------------------------------------------

def tabular_gradient_rows(master_seed: int = MASTER_SEED, n_random: int = 10) -> list[CheckRow]:
    rows = []
    rng = np.random.default_rng(master_seed)
    cases = []
    for name in ("cancellation", "partial_safety", "equal_safety"):
        cmdp = FIXTURES[name]().cmdp
        cases.append((f"{name}:uniform", 0, cmdp, np.zeros((cmdp.n_states, cmdp.n_actions))))
        cases.append((f"{name}:random", 0, cmdp, rng.normal(size=(cmdp.n_states, cmdp.n_actions))))
    for inst in random_batch(n_random, master_seed):
        c = inst.cmdp
        cases.append(("random", inst.seed, c, rng.normal(size=(c.n_states, c.n_actions))))
    for name, seed, cmdp, logits in cases:
        g = check_gradient_identity(cmdp, logits)
        rows.append(residual_row(f"score_gradient_q_form:{name}", seed, g.max_dev_q_form, 1e-6))
        rows.append(residual_row(f"score_gradient_a_form:{name}", seed, g.max_dev_a_form, 1e-6))
        rows.append(residual_row(f"score_gradient_q_vs_a:{name}", seed, g.q_vs_a, 1e-10))
    return rows


def _fd_relative_error(loss_fn, params: dict, grads: dict, step: float = 1e-6) -> float:
    worst = 0.0
    for name, analytic in grads.items():
        p = params[name]
        fd = np.zeros_like(p)
        for idx in np.ndindex(*p.shape):
            old = p[idx]
            p[idx] = old + step
            up = loss_fn()
            p[idx] = old - step
            down = loss_fn()
            p[idx] = old
            fd[idx] = (up - down) / (2 * step)
        denom = max(np.linalg.norm(fd), np.linalg.norm(analytic), 1e-8)
        worst = max(worst, float(np.linalg.norm(fd - analytic) / denom))
    return worst


def network_gradient_rows(seed: int = MASTER_SEED, batch: int = 16) -> list[CheckRow]:
    rows = []
    for env in ("point_run", "cart_safe"):
        for est in ("L1", "L2"):
            cfg = TrainConfig(env=env, hidden_sizes=(8, 8), entropy_coef=0.01, estimator_choice=est,
                              seed=seed, timesteps_T=64)
            state = init_state(cfg)
            rng = np.random.default_rng(seed)
            obs = rng.normal(size=(batch, state.obs_dim))
            acts, lp = state.agent.act(obs, rng)
            old_lp = lp + rng.normal(scale=0.2, size=batch)
            adv = rng.normal(size=batch)
            _, g = policy_loss_and_grads(state, obs, acts, old_lp, adv)
            err = _fd_relative_error(lambda: policy_loss_and_grads(state, obs, acts, old_lp, adv)[0], state.params, g)
            rows.append(residual_row(f"backward:policy:{env}:{est}", seed, err, 1e-4))
            if est == "L1":
                target = rng.uniform(size=batch)
                for net, squash in (("value", False), ("safety", True)):
                    _, g = regression_loss_and_grads(state, net, obs, target, squash)
                    err = _fd_relative_error(
                        lambda: regression_loss_and_grads(state, net, obs, target, squash)[0], state.params, g)
                    rows.append(residual_row(f"backward:{net}:{env}", seed, err, 1e-4))
    return rows


def estimator_agreement_rows(seed: int = MASTER_SEED, batch: int = 32) -> list[CheckRow]:
    """At the old parameters the two surrogate estimators have the same gradient."""
    rows = []
    for env in ("point_run", "cart_safe"):
        grads = {}
        for est in ("L1", "L2"):
            cfg = TrainConfig(env=env, estimator_choice=est, seed=seed, timesteps_T=64)
            state = init_state(cfg)
            rng = np.random.default_rng(seed)
            obs = rng.normal(size=(batch, state.obs_dim))
            acts, lp = state.agent.act(obs, rng)
            adv = rng.normal(size=batch)
            grads[est] = policy_loss_and_grads(state, obs, acts, lp, adv)[1]
        dev = max(float(np.abs(grads["L1"][k] - grads["L2"][k]).max()) for k in grads["L1"])
        rows.append(residual_row(f"l1_l2_gradient_at_old_params:{env}", seed, dev, 1e-8))
    return rows


def head_gradient_rows(seed: int = MASTER_SEED) -> list[CheckRow]:
    """Analytic Gaussian log-density gradients against finite differences."""
    rng = np.random.default_rng(seed)
    mean, log_std, act = rng.normal(size=3), rng.normal(scale=0.3, size=3), rng.normal(size=3)
    d_mean, d_log_std = nn.gaussian_log_prob_grads(mean, log_std, act)
    params = {"mean": mean, "log_std": log_std}
    err = _fd_relative_error(lambda: float(nn.gaussian_log_prob(params["mean"], params["log_std"], act)),
                             params, {"mean": d_mean, "log_std": d_log_std})
    return [residual_row("backward:gaussian_log_prob", seed, err, 1e-4)]


def suite_gradcheck(master_seed: int = MASTER_SEED) -> list[CheckRow]:
    return (tabular_gradient_rows(master_seed) + network_gradient_rows(master_seed)
            + head_gradient_rows(master_seed) + estimator_agreement_rows(master_seed))


def run_suite(name: str, master_seed: int = MASTER_SEED) -> list[CheckRow]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    if name == "toys":
        return suite_toys()
    if name == "gradcheck":
        return suite_gradcheck(master_seed)
    return {"oracle": suite_oracle, "theorems": suite_theorems, "lyapunov": suite_lyapunov}[name](
        master_seed=master_seed)
