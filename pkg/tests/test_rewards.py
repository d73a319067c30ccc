import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from altruism_irl.rewards import (
    AgentRewardParams,
    AltruismProfile,
    Bounds,
    RewardParams,
    compose_group_reward,
    materialize,
    parametrize,
    seat_expected_reward,
    seat_expected_reward_vjp,
    validate_group,
)


def test_materialize_examples():
    p = materialize(AgentRewardParams(np.zeros((1, 1)), 0.0))
    assert p.altruism == 0.0 and p.intrinsic[0, 0] == 0.5
    p = materialize(AgentRewardParams(np.zeros((1, 1)), 9.0))
    assert p.altruism == pytest.approx(10 / (1 + np.exp(-9)) - 5, abs=1e-12)
    assert p.altruism == pytest.approx(4.99877, abs=1e-5)


def test_parametrize_round_trip(rng):
    prof = AltruismProfile(rng.uniform(0.05, 0.95, (3, 2)), 1.7)
    back = materialize(parametrize(prof))
    np.testing.assert_allclose(back.intrinsic, prof.intrinsic, atol=1e-12)
    assert back.altruism == pytest.approx(1.7, abs=1e-12)


def test_zero_sum_identity(rng):
    profiles = {k: AltruismProfile(rng.random((4, 3)), -1.0) for k in range(2)}
    R = compose_group_reward(profiles, (0, 1))
    assert np.max(np.abs(R[0] + R[1])) < 1e-12


def test_fully_cooperative_identity(rng):
    profiles = {k: AltruismProfile(rng.random((3, 2)), 2.0) for k in range(3)}
    R = compose_group_reward(profiles, (0, 1, 2))
    assert np.max(np.abs(R[0] - R[1])) < 1e-12
    assert np.max(np.abs(R[1] - R[2])) < 1e-12
    total = sum(
        np.broadcast_to(profiles[k].intrinsic.reshape([3] + [2 if j == k else 1 for j in range(3)]), (3, 2, 2, 2))
        for k in range(3)
    ).reshape(3, 8)
    assert np.max(np.abs(R[0] - total)) < 1e-12


def test_egoistic_limit(rng):
    profiles = {k: AltruismProfile(rng.random((2, 3)), 0.0) for k in range(2)}
    R = compose_group_reward(profiles, (0, 1)).reshape(2, 2, 3, 3)
    np.testing.assert_array_equal(R[0], np.broadcast_to(profiles[0].intrinsic[:, :, None], (2, 3, 3)))
    np.testing.assert_array_equal(R[1], np.broadcast_to(profiles[1].intrinsic[:, None, :], (2, 3, 3)))


def test_group_validation():
    with pytest.raises(ValueError):
        validate_group((1, 1), 4)
    with pytest.raises(ValueError):
        validate_group((0, 7), 4)
    assert validate_group((3, 1), 4, 2) == (1, 3)
    with pytest.raises(ValueError):
        compose_group_reward({0: AltruismProfile(np.zeros((1, 1)), 0.0)}, (0,))


def test_seat_expected_matches_joint_expectation(rng):
    from altruism_irl.game import expected_reward
    from conftest import random_game, random_policy

    game, _ = random_game(0, num_states=3, num_actions=2, num_players=3)
    profiles = {k: AltruismProfile(rng.random((3, 2)), rng.uniform(-5, 5)) for k in range(3)}
    pi = random_policy(rng, 3, 3, 2)
    direct = expected_reward(game, compose_group_reward(profiles, (0, 1, 2)), pi)
    r = np.stack([profiles[k].intrinsic for k in range(3)])
    lam = np.array([profiles[k].altruism for k in range(3)])
    np.testing.assert_allclose(seat_expected_reward(r, lam, pi), direct, atol=1e-12)


def test_vjp_matches_finite_differences(rng):
    n, S, A = 3, 2, 3
    r, lam = rng.random((n, S, A)), rng.normal(size=n)
    pi = rng.dirichlet(np.ones(A), size=(n, S))
    w = rng.normal(size=(n, S, A))
    f = lambda r_, l_: np.sum(w * seat_expected_reward(r_, l_, pi))
    gr, gl = seat_expected_reward_vjp(w, r, lam, pi)
    h = 1e-6
    for idx in np.ndindex(r.shape):
        e = np.zeros_like(r)
        e[idx] = h
        assert gr[idx] == pytest.approx((f(r + e, lam) - f(r - e, lam)) / (2 * h), rel=1e-6, abs=1e-8)
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        assert gl[k] == pytest.approx((f(r, lam + e) - f(r, lam - e)) / (2 * h), rel=1e-6, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=6))
def test_materialized_values_stay_in_bounds(psi):
    b = Bounds()
    params = RewardParams(np.array(psi)[:, None, None], np.array(psi))
    for prof in params.profiles().values():
        assert b.r_min <= prof.intrinsic.min() and prof.intrinsic.max() <= b.r_max
        assert b.lambda_min <= prof.altruism <= b.lambda_max


def test_flat_round_trip(rng):
    p = RewardParams(rng.normal(size=(3, 2, 2)), rng.normal(size=3))
    q = p.with_flat(p.flat())
    np.testing.assert_array_equal(p.psi_r, q.psi_r)
    np.testing.assert_array_equal(p.psi_lambda, q.psi_lambda)
