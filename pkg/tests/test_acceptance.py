"""Acceptance criteria 1-10, one test each, one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
Verification suites go through the command line so the CSV reports they
write can be compared byte for byte in criterion 10.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from scpo import cli
from scpo.envs import make_env
from scpo.oracle import MASTER_SEED
from scpo.toys import FIXTURES
from scpo.trainer import (
    evaluate,
    first_iteration_below,
    init_state,
    metrics_csv,
    random_policy_return,
    run_training,
)
from scpo.verify import evaluate_label

TRAIN_SEEDS = (0, 1, 2, 3)
RUN_LIMIT_S = 600.0
BASELINE_EPISODES = 200


@pytest.fixture(scope="module")
def out_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


class SuiteRun:
    def __init__(self, name, out_dir):
        t0 = time.perf_counter()
        self.exit = cli.main(["verify", "--suite", name, "--seed", str(MASTER_SEED), "--out", str(out_dir)])
        self.seconds = time.perf_counter() - t0
        self.path = Path(out_dir) / f"verify_{name}_seed{MASTER_SEED}.csv"
        lines = self.path.read_text().splitlines()
        assert lines[0] == "check,instance_seed,value,passed"
        self.rows = [line.rsplit(",", 3) for line in lines[1:]]

    def select(self, prefix):
        return [r for r in self.rows if r[0].startswith(prefix)]

    @staticmethod
    def all_pass(rows) -> bool:
        return bool(rows) and all(r[3] == "1" for r in rows)


@pytest.fixture(scope="module")
def suites(out_root):
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = SuiteRun(name, out_root / "first")
        return cache[name]
    return get


@pytest.fixture(scope="module")
def training_runs():
    """Shipped configs: cart_safe (SCPO) and point_run (SCPO and Lagrangian) on four seeds."""
    runs = {}

    def get(config, seed):
        key = (config, seed)
        if key not in runs:
            doc, _ = cli.read_config_doc(config)
            cfg = cli.build_config(doc, seed=seed)
            t0 = time.perf_counter()
            state, history = run_training(cfg)
            runs[key] = (cfg, state, history, time.perf_counter() - t0)
        return runs[key]
    return get


def random_baseline(env_name, cfg_doc) -> float:
    """The larger of uniform-random actions and the untrained policy, so the 1.5x bar is not vacuous."""
    uniform = random_policy_return(make_env(env_name), BASELINE_EPISODES, seed=0)
    untrained = evaluate(init_state(cli.build_config(cfg_doc)), BASELINE_EPISODES, seed=0).mean_return
    return max(uniform, untrained)


# --------------------------------------------------------------------------

TOY_TABLES = {
    "cancellation": {0: 90.0, 1: 40.0, 4: -3.75, 8: -9.6, math.inf: -10.0},
    "partial_safety": {0: 90.0, 4: 3.84, 8: -0.18, math.inf: 0.0},
}


def test_criterion_1_toy_advantage_tables(suites, announce):
    run = suites("toys")
    worst = 0.0
    for name, table in TOY_TABLES.items():
        fx = FIXTURES[name]()
        for k, want in table.items():
            label = f"Ar{'inf' if math.isinf(k) else k}(s0,a0)"
            worst = max(worst, abs(evaluate_label(fx, label) - want))
    ok = run.exit == 0 and worst <= 0.01 and run.seconds < 5.0
    announce(1, ok, f"max |A - table| = {worst:.2e} (tol 0.01), verify toys exit {run.exit} in {run.seconds:.2f}s (< 5s)")
    assert ok


def test_criterion_2_safety_values(suites, announce):
    run = suites("oracle")
    rows = {r[0]: r for r in run.select("safety:")}
    q0 = float(rows["safety:cancellation_Qc_a0"][2])
    q1 = float(rows["safety:cancellation_Qc_a1"][2])
    vmax = float(rows["safety:partial_safety_max_Vc"][2])
    ok = q0 == 0.5 and q1 == 1.0 and abs(vmax - 0.7) <= 1e-9 and SuiteRun.all_pass(list(rows.values()))
    announce(2, ok, f"Qc(s0,a0)={q0!r} Qc(s0,a1)={q1!r} max Vc={vmax!r} (0.7 +- 1e-9)")
    assert ok


def test_criterion_3_theorem_identities(suites, announce):
    run = suites("theorems")
    seeds = {r[1] for r in run.rows}
    groups = ["policy_difference:reward", "policy_difference:cost", "advantage_substitution", "qc_bellman",
              "first_order_expansion", "surrogate_bound:", "surrogate_bound_rk:"]
    failing = [g for g in groups if not SuiteRun.all_pass(run.select(g))]
    ok = run.exit == 0 and not failing and len(seeds) == 100 and run.seconds < 60.0
    announce(3, ok, f"{len(run.rows)} checks on {len(seeds)} instances, failing groups {failing or 'none'}, "
                    f"{run.seconds:.1f}s (< 60s)")
    assert ok


def test_criterion_4_gradients(suites, announce):
    run = suites("gradcheck")
    tab = run.select("score_gradient")
    net = run.select("backward:")
    est = run.select("l1_l2_gradient_at_old_params")
    worst_net = max(float(r[2]) for r in net)
    worst_est = max(float(r[2]) for r in est)
    ok = run.exit == 0 and all(SuiteRun.all_pass(g) for g in (tab, net, est))
    announce(4, ok, f"{len(tab)} tabular identity rows (< 1e-6), max network FD rel err {worst_net:.1e} (< 1e-4), "
                    f"max L1/L2 gap {worst_est:.1e} (< 1e-8)")
    assert ok


def test_criterion_5_monotonicity_and_stability(suites, announce):
    run = suites("oracle")
    mono = run.select("monotone_rk:")
    stab = run.select("stability:")
    n_random = len(run.select("monotone_rk:random"))
    worst = min(float(r[2]) for r in mono)
    ok = SuiteRun.all_pass(mono) and SuiteRun.all_pass(stab) and n_random == 100 and len(mono) == 100 + len(FIXTURES)
    announce(5, ok, f"{len(mono)} monotone chains, min slack {worst:.2e} (>= -1e-12); "
                    f"min Vc over V^(r,inf) argmax = {stab[0][2]}")
    assert ok


def test_criterion_6_estimator_bound(suites, announce):
    run = suites("oracle")
    rows = run.select("vc_targets:")
    ok = SuiteRun.all_pass(rows) and len(rows) == 12
    announce(6, ok, "10^5 fuzzed flag sequences x 4 discounts: targets in [0, 1], all-safe == 1 exactly")
    assert ok


def test_criterion_7_augmentation_ablation(suites, announce):
    run = suites("oracle")
    rows = {r[0]: r for r in run.select("augmentation:")}
    dp = float(rows["augmentation:dp_return"][2])
    cost = float(rows["augmentation:dp_cost"][2])
    stat = float(rows["augmentation:stationary_safe_return"][2])
    ok = SuiteRun.all_pass(list(rows.values())) and dp == 5.0 and cost == 5.0 and dp > stat
    announce(7, ok, f"DP return {dp!r} at cost {cost!r}; best stationary unaugmented constrained return {stat:.4f}")
    assert ok


def test_criterion_8_desk_scale_training(training_runs, announce):
    details, ok = [], True

    cfg, state, hist, secs = training_runs("cart_safe", 0)
    cost20 = float(np.mean([m.mean_cost for m in hist[-20:]]))
    ret20 = float(np.mean([m.mean_return for m in hist[-20:]]))
    base = random_baseline("cart_safe", cli.read_config_doc("cart_safe")[0])
    a_ok = cost20 <= 1.0 and ret20 >= 1.5 * base and secs <= RUN_LIMIT_S
    details.append(f"(a) cart_safe cost {cost20:.3f} <= 1, return {ret20:.1f} >= 1.5 x {base:.1f}, {secs:.0f}s")
    ok &= a_ok

    base = random_baseline("point_run", cli.read_config_doc("point_run")[0])
    b_ok, wins, firsts, slow = True, 0, [], 0.0
    for seed in TRAIN_SEEDS:
        _, st_s, h_s, t_s = training_runs("point_run", seed)
        _, st_l, h_l, t_l = training_runs("point_run_lagrangian", seed)
        slow = max(slow, t_s, t_l)
        limit = st_s.env.cost_limit
        f_s, f_l = first_iteration_below(h_s, limit), first_iteration_below(h_l, limit)
        firsts.append((f_s, f_l))
        wins += f_s <= f_l
        if seed == 0:
            c20 = float(np.mean([m.mean_cost for m in h_s[-20:]]))
            r20 = float(np.mean([m.mean_return for m in h_s[-20:]]))
            b_ok = c20 <= 25.0 and r20 >= 1.5 * base
            details.append(f"(b) point_run cost {c20:.2f} <= 25, return {r20:.1f} >= 1.5 x {base:.2f}")
    c_ok = wins >= 3 and slow <= RUN_LIMIT_S
    details.append(f"(c) first-below (scpo, lagrangian) per seed {firsts}: {wins}/4 wins; slowest run {slow:.0f}s")
    ok &= b_ok and c_ok
    announce(8, ok, "; ".join(details))
    assert ok


def test_criterion_9_lyapunov(suites, announce):
    run = suites("lyapunov")
    groups = ["monotone_contraction", "upper_bound_finite_T", "occupancy_bound", "lyapunov_membership",
              "relaxed_set:gated_chain_dp"]
    failing = [g for g in groups if not SuiteRun.all_pass(run.select(g))]
    worst = min(float(r[2]) for r in run.rows if r[0].split(":")[0] in groups[:3])
    ok = run.exit == 0 and not failing and run.seconds < 30.0
    announce(9, ok, f"{len(run.rows)} checks, min slack {worst:.2e} (>= -1e-9), failing {failing or 'none'}, "
                    f"{run.seconds:.1f}s (< 30s)")
    assert ok


def test_criterion_10_determinism(suites, training_runs, out_root, announce):
    mismatched = []
    for name in cli.SUITES:
        first = suites(name)
        again = SuiteRun(name, out_root / "second")
        if first.path.read_bytes() != again.path.read_bytes():
            mismatched.append(name)
    cfg, _, hist, _ = training_runs("point_run", 0)
    _, hist2 = run_training(cfg)
    if metrics_csv(hist).encode() != metrics_csv(hist2).encode():
        mismatched.append("point_run metrics")
    ok = not mismatched
    announce(10, ok, f"{len(cli.SUITES)} verify CSVs and point_run metrics CSV rerun; mismatches: {mismatched or 'none'}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
