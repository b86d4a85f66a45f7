"""Exact tabular toolkit for on/off-policy monotonic improvement bounds."""

from .bounds import (
    BoundReport,
    bound_report,
    cor5_lower_bound,
    performance_difference,
    state_dist_gap,
    thm1_lower_bound,
)
from .environments import EnvSpec, Trajectory, Transition, build, rollout
from .mdp import Mdp, PolicyTable, ValueBundle, advantage_span, policy_advantage, solve_values

__version__ = "0.1.0"
