import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scpo.cmdp import Trajectory
from scpo.estimators import (
    EstimatorConfig,
    discounted_suffix_sums,
    gae_advantages,
    nstep_qc_estimate,
    vc_gamma_targets,
)


def test_vc_targets_examples():
    np.testing.assert_array_equal(vc_gamma_targets([1, 1, 1], 0.9), [1.0, 1.0, 1.0])
    np.testing.assert_allclose(vc_gamma_targets([1, 1, 0], 0.5), [0.75, 0.5, 0.0])
    np.testing.assert_allclose(vc_gamma_targets([1, 0, 0], 1.0), [0.0, 0.0, 0.0])


def test_vc_targets_reject_recovering_flags():
    with pytest.raises(ValueError):
        vc_gamma_targets([1, 0, 1], 0.9)
    with pytest.raises(ValueError):
        vc_gamma_targets([[1, 1], [0, 1]], 0.9)
    with pytest.raises(ValueError):
        vc_gamma_targets([1, 1], 0.0)


@settings(max_examples=200)
@given(st.integers(1, 60), st.integers(0, 60), st.floats(0.01, 1.0))
def test_vc_targets_bounded(horizon, first_unsafe, gamma):
    flags = (np.arange(horizon) < first_unsafe).astype(int)
    v = vc_gamma_targets(flags, gamma)
    assert np.all(v >= 0) and np.all(v <= 1)
    assert np.all(np.diff(v) <= 1e-15)
    if first_unsafe >= horizon:
        assert np.all(v == 1.0)


def test_nstep_estimates():
    flags = np.array([1, 1, 1, 0])
    v = np.array([0.9, 0.8, 0.7, 0.6])
    np.testing.assert_allclose(nstep_qc_estimate(flags, v), [0.8, 0.7, 0.6, 0.0])
    two = EstimatorConfig(nstep_weights=(0.5, 0.5))
    np.testing.assert_allclose(nstep_qc_estimate(flags, v, two), [0.5 * 0.8 + 0.5 * 0.7, 0.5 * 0.7 + 0.5 * 0.6,
                                                                  0.5 * 0.6 + 0.0, 0.0])
    traj = Trajectory((0, 0, 0, 0), (0,) * 4, (0.0,) * 4, (0.0,) * 4, safety_flags=(1, 1, 1, 0))
    np.testing.assert_allclose(nstep_qc_estimate(traj, v), [0.8, 0.7, 0.6, 0.0])


def test_estimator_config_validation():
    with pytest.raises(ValueError):
        EstimatorConfig(nstep_weights=(0.5, 0.4))
    with pytest.raises(ValueError):
        EstimatorConfig(gae_lambda=1.5)


def test_gae_limits():
    rng = np.random.default_rng(0)
    r = rng.normal(size=(3, 7))
    v = rng.normal(size=(3, 8))
    v[:, -1] = 0.0
    gamma = 0.9
    # lambda = 1: discounted return minus baseline
    np.testing.assert_allclose(gae_advantages(r, v, gamma, 1.0), discounted_suffix_sums(r, gamma) - v[:, :-1])
    # lambda = 0: one-step TD error
    np.testing.assert_allclose(gae_advantages(r, v, gamma, 0.0), r + gamma * v[:, 1:] - v[:, :-1])


def test_gae_manual_single_episode():
    r = np.array([1.0, 0.0, 2.0])
    v = np.array([0.5, 0.2, 0.1, 0.0])
    g, lam = 0.9, 0.8
    d = r + g * v[1:] - v[:-1]
    want = [d[0] + g * lam * (d[1] + g * lam * d[2]), d[1] + g * lam * d[2], d[2]]
    np.testing.assert_allclose(gae_advantages(r, v, g, lam), want)
    with pytest.raises(ValueError):
        gae_advantages(r, v[:-1], g, lam)
