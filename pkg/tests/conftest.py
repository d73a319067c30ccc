import numpy as np
import pytest
from scipy.special import softmax

from altruism_irl.environments import RandomMgConfig, generate_random_mg
from altruism_irl.game import RewardlessGame
from altruism_irl.rewards import RewardParams


def random_game(seed, num_states=3, num_actions=2, num_players=2, num_agents=None, **kw):
    cfg = RandomMgConfig(
        num_states=num_states, num_actions=num_actions, num_players=num_players,
        num_agents=num_agents or num_players, seed=seed, **kw,
    )
    return generate_random_mg(cfg)


def random_policy(rng, n, S, A):
    return softmax(rng.normal(size=(n, S, A)), axis=-1)


def random_params(rng, m, S, A, scale=1.0):
    return RewardParams(scale * rng.normal(size=(m, S, A)), scale * rng.normal(size=m))


def single_state_game(num_actions=2, num_players=1, discount=0.0):
    J = num_actions**num_players
    return RewardlessGame(1, num_actions, num_players, np.ones((1, J, 1)), discount, np.ones(1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria register one line each here; printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
