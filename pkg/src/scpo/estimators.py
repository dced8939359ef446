"""Sample-based targets for the safety critic and GAE for the transformed reward.

Functions accept a single trajectory (1-D arrays) or a batch of equal-length
episodes (2-D arrays, time on the last axis).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cmdp import Trajectory, check_flags


@dataclass(frozen=True)
class EstimatorConfig:
    safety_gamma: float = 0.995
    gae_gamma: float = 0.99
    gae_lambda: float = 0.95
    nstep_weights: tuple[float, ...] = field(default=(1.0,))

    def __post_init__(self):
        if not 0 < self.safety_gamma <= 1 or not 0 < self.gae_gamma <= 1:
            raise ValueError("discounts must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        w = np.asarray(self.nstep_weights, dtype=float)
        if w.ndim != 1 or len(w) == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("nstep_weights must be nonnegative and sum to 1")


def _flags_2d(flags) -> tuple[np.ndarray, bool]:
    f = np.asarray(flags)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    if f.shape[-1] < 1:
        raise ValueError("need at least one step")
    if f.ndim != 2:
        raise ValueError("flags must be 1-d or 2-d")
    if f.shape[0] == 1:
        check_flags(f[0])
    elif not np.isin(f, (0, 1)).all() or np.any(np.diff(f.astype(int), axis=1) > 0):
        bad = next(i for i, row in enumerate(f) if not np.isin(row, (0, 1)).all() or np.any(np.diff(row.astype(int)) > 0))
        check_flags(f[bad])
    return f.astype(float), single


def vc_gamma_targets(flags, safety_gamma: float) -> np.ndarray:
    """Discounted safety targets: ``V(T-1) = f(T-1)``, ``V(t) = (1-g) f(t) + g V(t+1)``.

    The update is evaluated as ``f + g (V - f)``, which stays in [0, 1] under
    rounding and gives exactly 1 on all-safe sequences.
    """
    if not 0 < safety_gamma <= 1:
        raise ValueError("safety_gamma must lie in (0, 1]")
    f, single = _flags_2d(flags)
    out = np.empty_like(f)
    out[:, -1] = f[:, -1]
    for t in range(f.shape[1] - 2, -1, -1):
        out[:, t] = f[:, t] + safety_gamma * (out[:, t + 1] - f[:, t])
    return out[0] if single else out


def nstep_qc_estimate(traj, vc_values, profile: EstimatorConfig = EstimatorConfig()) -> np.ndarray:
    """Weighted n-step safety Q estimates ``f(s_{t+n-1}) V^c(s_{t+n})``.

    ``traj`` is a :class:`Trajectory` or its flag sequence(s). When ``t+n`` runs
    past the last step the estimate is the final flag.
    """
    flags = traj.safety_flags if isinstance(traj, Trajectory) else traj
    f, single = _flags_2d(flags)
    v = np.atleast_2d(np.asarray(vc_values, dtype=float))
    if v.shape != f.shape:
        raise ValueError(f"vc_values shape {v.shape} does not match flags {f.shape}")
    H = f.shape[1]
    out = np.zeros_like(f)
    for n, w in enumerate(profile.nstep_weights, start=1):
        if w == 0:
            continue
        est = np.repeat(f[:, -1:], H, axis=1)
        m = H - n
        if m > 0:
            est[:, :m] = f[:, n - 1:n - 1 + m] * v[:, n:]
        out += w * est
    return out[0] if single else out


def gae_advantages(rewards_prime, values, gamma: float, lam: float) -> np.ndarray:
    """GAE over episodes; ``values`` carries one extra bootstrap slot per episode."""
    r = np.asarray(rewards_prime, dtype=float)
    v = np.asarray(values, dtype=float)
    single = r.ndim == 1
    r, v = np.atleast_2d(r), np.atleast_2d(v)
    if v.shape != (r.shape[0], r.shape[1] + 1):
        raise ValueError(f"values shape {v.shape} must be rewards shape {r.shape} plus one step")
    delta = r + gamma * v[:, 1:] - v[:, :-1]
    adv = np.empty_like(r)
    acc = np.zeros(r.shape[0])
    for t in range(r.shape[1] - 1, -1, -1):
        acc = delta[:, t] + gamma * lam * acc
        adv[:, t] = acc
    return adv[0] if single else adv


def discounted_suffix_sums(x, gamma: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    acc = np.zeros(x.shape[:-1])
    for t in range(x.shape[-1] - 1, -1, -1):
        acc = x[..., t] + gamma * acc
        out[..., t] = acc
    return out
