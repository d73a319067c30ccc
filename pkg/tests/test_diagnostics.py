import numpy as np
import pytest

from altruism_irl.diagnostics import (
    check_rank_condition,
    estimate_partition,
    lambda_baseline,
    lambda_error,
    numerical_rank,
    policy_kl,
    rank_matrix,
    reward_baseline,
    reward_error,
    synthesize_partner,
)
from altruism_irl.environments import COMPACT_LAYOUT, build_kitchen, chef_intrinsic_reward, parse_layout
from altruism_irl.game import RewardlessGame, solve_qre
from altruism_irl.gaps import GapConfig
from altruism_irl.rewards import AltruismProfile, Bounds, compose_group_reward

from conftest import random_game, random_policy


def test_rank_single_state_satisfied(rng):
    game = RewardlessGame(1, 2, 2, np.ones((1, 4, 1)), 0.9, np.ones(1))
    rep = check_rank_condition(game, random_policy(rng, 2, 1, 2), random_policy(rng, 2, 1, 2), 0)
    assert rep.required == 1 and rep.satisfied


def test_rank_duplicate_group_not_satisfied(rng):
    game, _ = random_game(0, num_states=3, num_actions=2)
    pi = random_policy(rng, 2, 3, 2)
    rep = check_rank_condition(game, pi, pi, 0)
    assert rep.stacked_rank <= 3 < rep.required and not rep.satisfied


def test_rank_random_matches_oracle(rng):
    game, _ = random_game(1, num_states=4, num_actions=3)
    g, h = random_policy(rng, 2, 4, 3), random_policy(rng, 2, 4, 3)
    rep = check_rank_condition(game, g, h, 1)
    assert rep.stacked_rank == np.linalg.matrix_rank(rank_matrix(game, g, h, 1))
    assert rep.satisfied and rep.margin > 0
    with pytest.raises(ValueError):
        check_rank_condition(game, g[:1], h, 0)


def test_numerical_rank():
    assert numerical_rank(np.diag([1.0, 1e-20, 0.0]))[0] == 1


def test_lambda_error_examples():
    assert lambda_error([5.0], [0.0]) == pytest.approx(3.0)
    assert lambda_error([1.5, -2.0], [1.5, -2.0]) == 0.0
    truth = np.array([-3.0, 0.5, 4.0])
    guesses = np.random.default_rng(0).uniform(-5, 5, size=(20000, 3))
    mc = np.mean((guesses - truth) ** 2) / np.mean(lambda_baseline(truth, Bounds()))
    assert mc == pytest.approx(1.0, abs=0.03)
    with pytest.raises(ValueError):
        lambda_error([], [])


def test_reward_error_examples(rng):
    truth = (rng.random((2, 4, 3)) < 0.1).astype(float)
    assert reward_error(truth, truth, align="raw") == 0.0
    shifted = truth + 0.3
    assert reward_error(shifted, truth) == pytest.approx(0.0, abs=1e-15)
    raw = reward_error(shifted, truth, align="raw")
    assert raw == pytest.approx(0.09 / np.mean(reward_baseline(truth, Bounds())))
    # closed-form baseline against Monte-Carlo uniform guessing
    guesses = rng.random((20000,) + truth.shape)
    assert np.mean((guesses - truth) ** 2) == pytest.approx(np.mean(reward_baseline(truth, Bounds())), rel=0.02)
    with pytest.raises(ValueError):
        reward_error(truth, truth, align="median")


def test_policy_kl_examples():
    oracle = np.array([[0.5, 0.5]])
    assert policy_kl(oracle, oracle) == 0.0
    # KL(oracle || candidate)
    assert policy_kl(oracle, np.array([[0.75, 0.25]])) == pytest.approx(0.1438, abs=1e-3)
    assert policy_kl(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]])) == np.inf
    dup_o = np.array([[0.2, 0.8], [0.2, 0.8]])
    dup_c = np.array([[0.4, 0.6], [0.4, 0.6]])
    assert policy_kl(dup_o, dup_c) == pytest.approx(policy_kl(dup_o[:1], dup_c[:1]))


@pytest.fixture(scope="module")
def partition_setup():
    game, profiles = random_game(0, num_states=3, num_actions=2)
    R = compose_group_reward(dict(enumerate(profiles)), (0, 1))
    pi = solve_qre(game, R, 0.1).policy
    return game, dict(enumerate(profiles)), pi


def test_partition_volume_at_zero_concentration(partition_setup):
    game, truth, pi = partition_setup
    # c = 0 is rejected by GapConfig; use a concentration small enough that e^{-c gap} = 1
    est = estimate_partition(game, truth, (0, 1), pi, GapConfig("psg", 1e-300), 0.1, n_samples=500, rng=0)
    assert est.value == pytest.approx(1.0 * 10.0**2, rel=1e-12)


def test_partition_error_shrinks_with_samples(partition_setup):
    game, truth, pi = partition_setup
    cfg = GapConfig("psg", 50.0)
    sd = []
    for n in (200, 800):
        vals = [estimate_partition(game, truth, (0, 1), pi, cfg, 0.1, n_samples=n, rng=s).log_value for s in range(20)]
        sd.append(np.std(vals))
    assert 1.3 < sd[0] / sd[1] < 3.2  # sqrt(4) = 2 up to Monte-Carlo noise


def test_partition_common_random_numbers(partition_setup):
    game, truth, pi = partition_setup
    cfg = GapConfig("psg", 50.0)
    a = estimate_partition(game, truth, (0, 1), pi, cfg, 0.1, n_samples=300, rng=[4, 2])
    b = estimate_partition(game, truth, (0, 1), pi, cfg, 0.1, n_samples=300, rng=[4, 2])
    assert a.value == b.value and 0 < a.ess <= 300


def test_synthesis_oracle_and_egoistic_limit():
    game, codec = build_kitchen(parse_layout(COMPACT_LAYOUT))
    ai = chef_intrinsic_reward(codec, "deliver")
    chef = AltruismProfile(chef_intrinsic_reward(codec, "cook"), -0.1)
    syn = synthesize_partner(game, ai, chef.intrinsic, 0.0, chef, 0.05)
    assert syn.converged
    # target 0 is the egoistic game of both agents
    profiles = {0: AltruismProfile(ai, 0.0), 1: AltruismProfile(chef.intrinsic, 0.0)}
    direct = solve_qre(game, compose_group_reward(profiles, (0, 1), game.seat_views), 0.05).policy
    assert policy_kl(direct, syn.policy) < 1e-8
    again = synthesize_partner(game, ai, chef.intrinsic, 0.0, chef, 0.05)
    assert policy_kl(syn.policy, again.policy) == 0.0
