"""Tabular multi-agent inverse RL that separates intrinsic rewards from altruism."""

from .game import RewardlessGame, SolverConfig, solve_qre
from .gaps import GapConfig, psg, qig
from .rewards import AltruismProfile, Bounds, RewardParams, compose_group_reward

__all__ = [
    "AltruismProfile",
    "Bounds",
    "GapConfig",
    "RewardParams",
    "RewardlessGame",
    "SolverConfig",
    "compose_group_reward",
    "psg",
    "qig",
    "solve_qre",
]
