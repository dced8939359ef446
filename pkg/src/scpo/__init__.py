"""Safety-critic policy optimization with exact oracles for small CMDPs."""

from .cmdp import (
    CumulativeCostAugmenter,
    TabularCmdp,
    TabularPolicy,
    Trajectory,
    augment_q,
    rollout,
    safety_flag,
    trajectory_safety,
)

__version__ = "0.1.0"
