"""Dirichlet random Markov games with sparse binary intrinsic rewards."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from ..game import RewardlessGame
from ..rewards import AltruismProfile


@dataclass
class RandomMgConfig:
    num_states: int = 8
    num_actions: int = 3
    num_players: int = 2
    num_agents: int = 4
    dirichlet_alpha: float = 0.3
    reward_sparsity: Optional[float] = None  # fraction of (s, a) pairs, or a count if >= 1
    discount: float = 0.9
    lambda_range: Tuple[float, float] = (-5.0, 5.0)
    seed: int = 0

    def __post_init__(self):
        if self.num_agents < self.num_players:
            raise ValueError("need at least as many agents as players")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be positive")
        self.lambda_range = tuple(float(x) for x in self.lambda_range)

    def reward_count(self) -> int:
        pairs = self.num_states * self.num_actions
        if self.reward_sparsity is None:
            count = math.ceil(0.1 * pairs)
        elif self.reward_sparsity >= 1:
            count = int(self.reward_sparsity)
        else:
            count = math.ceil(self.reward_sparsity * pairs)
        if count > pairs:
            raise ValueError(f"sparsity count {count} exceeds {pairs} state-action pairs")
        return count

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["lambda_range"] = list(self.lambda_range)
        return doc


def random_transitions(rng, num_states, num_joint, alpha) -> np.ndarray:
    T = rng.dirichlet(np.full(num_states, alpha), size=(num_states, num_joint))
    # renormalise so rows sum to one to machine precision
    return T / T.sum(-1, keepdims=True)


def generate_random_mg(cfg: RandomMgConfig) -> Tuple[RewardlessGame, List[AltruismProfile]]:
    rng = np.random.default_rng(cfg.seed)
    S, A, n = cfg.num_states, cfg.num_actions, cfg.num_players
    count = cfg.reward_count()
    T = random_transitions(rng, S, A**n, cfg.dirichlet_alpha)
    game = RewardlessGame(S, A, n, T, cfg.discount, np.full(S, 1.0 / S))
    lo, hi = cfg.lambda_range
    profiles = []
    for _ in range(cfg.num_agents):
        lam = float(rng.uniform(lo, hi))
        r = np.zeros(S * A)
        r[rng.choice(S * A, size=count, replace=False)] = 1.0
        profiles.append(AltruismProfile(r.reshape(S, A), lam))
    return game, profiles
