"""Small named CMDPs with known safety and advantage values.

Each builder returns a :class:`ToyFixture` whose ``expected_values`` are
checked against the exact oracle. Branch payoffs are lumped onto the first
decision step and the successor states are absorbing, which is the smallest
structure that produces the listed values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .cmdp import TabularCmdp, TabularPolicy, dump_cmdp


@dataclass(frozen=True)
class ExpectedValue:
    label: str
    value: float
    tol: float = 0.01


@dataclass(frozen=True)
class ToyFixture:
    name: str
    cmdp: TabularCmdp
    reference_policy: TabularPolicy
    expected_values: tuple[ExpectedValue, ...]
    action_names: tuple[str, ...] = ()
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_text(self) -> str:
        return dump_cmdp(self.cmdp)

    def expected(self, label: str) -> ExpectedValue:
        for ev in self.expected_values:
            if ev.label == label:
                return ev
        raise KeyError(label)


def solve_branch_payoffs(adv_k0: float, adv_k1: float, p0: float, p1: float) -> tuple[float, float]:
    """Recover lump payoffs ``(R0, R1)`` from the ``k=0`` and ``k=1`` advantages of ``a0``.

    Under a uniform two-action policy ``A(a0) = (Q(a0) - Q(a1)) / 2`` and
    ``Q^{r,k}(a) = R_a p_a^k`` when the payoff is collected at the first step.
    """
    lhs = np.array([[0.5, -0.5], [0.5 * p0, -0.5 * p1]])
    R0, R1 = np.linalg.solve(lhs, [adv_k0, adv_k1])
    return float(R0), float(R1)


def _branch_cmdp(R0, R1, p0, p1, horizon=2):
    # states: 0 = start, 1 = safe absorbing, 2 = unsafe absorbing (cost 2 > c0)
    P = np.zeros((3, 2, 3))
    P[0, 0] = [0.0, p0, 1.0 - p0]
    P[0, 1] = [0.0, p1, 1.0 - p1]
    P[1, :, 1] = 1.0
    P[2, :, 2] = 1.0
    r = np.zeros((3, 2))
    r[0] = [R0, R1]
    return TabularCmdp(P, r, np.array([0.0, 0.0, 2.0]), budget_c0=1.0, horizon_T=horizon)


def build_gated_chain() -> ToyFixture:
    """Stay in a rewarding costly state or leave for an absorbing idle state.

    Budget 5 over 10 steps: the best augmented policy stays five times then
    leaves, which needs the cumulative cost in the state.
    """
    # states: 0 = idle absorbing, 1 = rewarding; actions: 0 = leave, 1 = stay
    P = np.zeros((2, 2, 2))
    P[0, :, 0] = 1.0
    P[1, 0, 0] = 1.0
    P[1, 1, 1] = 1.0
    r = np.array([[0.0, 0.0], [1.0, 1.0]])
    cmdp = TabularCmdp(P, r, np.array([0.0, 1.0]), budget_c0=5.0, horizon_T=10, initial_state=1)
    return ToyFixture(
        name="gated_chain",
        cmdp=cmdp,
        reference_policy=TabularPolicy.uniform(2, 2),
        expected_values=(
            ExpectedValue("dp_return", 5.0, 1e-12),
            ExpectedValue("dp_cost", 5.0, 1e-12),
            ExpectedValue("augmented_states", 20, 0),
        ),
        action_names=("a0", "a1"),
        metadata={
            "states": {"s0": 0, "s1": 1},
            "start": "s1",
            "a0": "move to s0 (absorbing, reward 0, cost 0)",
            "a1": "stay in s1",
            "reward_s1": 1.0,
            "cost_s1": 1.0,
            "note": "s1 pays reward 1 for either action; its cost counts on entry, including t=0",
        },
    )


def build_cancellation_cmdp() -> ToyFixture:
    """High-payoff risky action versus low-payoff safe action under a uniform policy."""
    p0, p1 = 0.5, 1.0
    R0, R1 = solve_branch_payoffs(90.0, 40.0, p0, p1)
    cmdp = _branch_cmdp(R0, R1, p0, p1)
    ev = (
        ExpectedValue("Qc(s0,a0)", 0.5, 1e-12),
        ExpectedValue("Qc(s0,a1)", 1.0, 1e-12),
        ExpectedValue("Ar0(s0,a0)", 90.0),
        ExpectedValue("Ar0(s0,a1)", -90.0),
        ExpectedValue("Ar1(s0,a0)", 40.0),
        ExpectedValue("Ar4(s0,a0)", -3.75),
        ExpectedValue("Ar8(s0,a0)", -9.6, 0.01),
        ExpectedValue("Arinf(s0,a0)", -10.0),
    )
    return ToyFixture(
        "cancellation", cmdp, TabularPolicy.uniform(3, 2), ev, ("a0", "a1"),
        metadata={"R0": R0, "R1": R1, "p0": p0, "p1": p1,
                  "solved_from": "k=0 and k=1 advantage rows",
                  "states": {"s0": 0, "safe": 1, "unsafe": 2}, "unsafe_cost": 2.0},
    )


def build_partial_safety_cmdp() -> ToyFixture:
    """Like the cancellation CMDP but no action is fully safe."""
    p0, p1 = 0.5, 0.7
    # same lump payoffs as the cancellation fixture; the k=0 row pins R0 - R1 = 180
    R0, R1 = solve_branch_payoffs(90.0, 40.0, 0.5, 1.0)
    cmdp = _branch_cmdp(R0, R1, p0, p1)
    ev = (
        ExpectedValue("max_Vc(s0)", 0.7, 1e-9),
        ExpectedValue("Ar0(s0,a0)", 90.0),
        ExpectedValue("Ar4(s0,a0)", 3.84, 0.01),
        ExpectedValue("Ar8(s0,a0)", -0.18, 0.01),
        ExpectedValue("Arinf(s0,a0)", 0.0),
        ExpectedValue("Arinf(s0,a1)", 0.0),
    )
    return ToyFixture(
        "partial_safety", cmdp, TabularPolicy.uniform(3, 2), ev, ("a0", "a1"),
        metadata={"R0": R0, "R1": R1, "p0": p0, "p1": p1,
                  "solved_from": "payoffs shared with the cancellation fixture",
                  "states": {"s0": 0, "safe": 1, "unsafe": 2}, "unsafe_cost": 2.0},
    )


def build_equal_safety_cmdp() -> ToyFixture:
    """Two equally safe actions whose failures carry different costs."""
    # states: 0 = start, 1 = safe absorbing, 2 = light failure (cost 2), 3 = heavy failure (cost 10)
    # actions: 0 = "a1" (fails into the heavy state), 1 = "a2" (fails into the light state)
    P = np.zeros((4, 2, 4))
    P[0, 0] = [0.0, 0.9, 0.0, 0.1]
    P[0, 1] = [0.0, 0.9, 0.1, 0.0]
    for s in (1, 2, 3):
        P[s, :, s] = 1.0
    r = np.zeros((4, 2))
    r[0] = 10.0
    cmdp = TabularCmdp(P, r, np.array([0.0, 0.0, 2.0, 10.0]), budget_c0=1.0, horizon_T=3)
    ev = (
        ExpectedValue("Qc(s0,a1)", 0.9, 1e-12),
        ExpectedValue("Qc(s0,a2)", 0.9, 1e-12),
    )
    return ToyFixture(
        "equal_safety", cmdp, TabularPolicy.uniform(4, 2), ev, ("a1", "a2"),
        metadata={"high_cost_action": 0, "low_cost_action": 1,
                  "states": {"s0": 0, "safe": 1, "light": 2, "heavy": 3},
                  "fail_prob": 0.1, "costs": {"light": 2.0, "heavy": 10.0}},
    )


FIXTURES = {
    "gated_chain": build_gated_chain,
    "cancellation": build_cancellation_cmdp,
    "partial_safety": build_partial_safety_cmdp,
    "equal_safety": build_equal_safety_cmdp,
}


def parse_k(label: str) -> float:
    """``"Ar4(s0,a0)"`` -> 4, ``"Arinf(...)"`` -> inf."""
    body = label[2:label.index("(")]
    return math.inf if body == "inf" else int(body)
