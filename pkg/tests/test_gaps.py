import numpy as np
import pytest

from altruism_irl.game import SolverConfig, soft_value_iteration, induced_transition, solve_qre, soft_policy_evaluation
from altruism_irl.gaps import GapConfig, gap_batch, group_gap, psg, psg_seats, qig, qig_seats, soft_response
from altruism_irl.rewards import compose_group_reward

from conftest import random_game, random_params, random_policy, single_state_game


def test_psg_hand_example():
    game = single_state_game(2)
    value = psg(game, np.array([[[1.0, 0.0]]]), np.full((1, 1, 2), 0.5), 1.0)
    p = np.array([0.7310586, 0.2689414])
    assert value == pytest.approx(np.sum(0.5 * np.log(0.5 / p)), abs=1e-6)
    # KL((0.5, 0.5) || (0.7311, 0.2689)) evaluates to 0.1201
    assert value == pytest.approx(0.1201, abs=1e-3)


def test_soft_response_zero_reward_uniform(rng):
    # uniform needs state-independent entropy bonuses: own rows with equal entropy
    game, _ = random_game(0, num_states=3, num_actions=3)
    pi = random_policy(rng, 2, 3, 3)
    pi[1] = pi[1, 0]
    sigma = soft_response(game, np.zeros((2, 3, 9)), pi, 0.2, 1)
    np.testing.assert_allclose(sigma, 1 / 3, atol=1e-12)
    # with gamma = 0 any joint policy works
    game.discount = 0.0
    sigma = soft_response(game, np.zeros((2, 3, 9)), random_policy(rng, 2, 3, 3), 0.2, 0)
    np.testing.assert_allclose(sigma, 1 / 3, atol=1e-12)


def test_soft_response_matches_enumeration(rng):
    game, profiles = random_game(1, num_states=3, num_actions=2)
    R = compose_group_reward(dict(enumerate(profiles)), (0, 1))
    pi = random_policy(rng, 2, 3, 2)
    beta, gamma = 0.7, game.discount
    V = soft_policy_evaluation(game, R, pi, beta).values
    T = game.transition.reshape(3, 2, 2, 3)
    R4 = R.reshape(2, 3, 2, 2)
    q = np.zeros((3, 2))
    for s in range(3):
        for a in range(2):
            for b in range(2):  # seat 0's action a, seat 1 plays b
                q[s, a] += pi[1, s, b] * (R4[0, s, a, b] + gamma * T[s, a, b] @ V[0])
    expect = np.exp(beta * q) / np.exp(beta * q).sum(-1, keepdims=True)
    np.testing.assert_allclose(soft_response(game, R, pi, beta, 0), expect, atol=1e-10)


def test_qig_single_agent_reduction(rng):
    game = random_game(2, num_states=4, num_actions=3, num_players=1, num_agents=1)[0]
    R = rng.random((1, 4, 3))
    pi = random_policy(rng, 1, 4, 3)
    _, v_star, _ = soft_value_iteration(induced_transition(game, pi, 0), R[0], game.discount, 0.5, tol=1e-13)
    v = soft_policy_evaluation(game, R, pi, 0.5).values[0]
    assert qig(game, R, pi, 0.5) == pytest.approx(np.sum(v_star - v), abs=1e-8)


def test_psg_monotone_toward_uniform():
    game, profiles = random_game(3, num_states=4, num_actions=2, lambda_range=(-1, -1))
    R = compose_group_reward(dict(enumerate(profiles)), (0, 1))
    qre = solve_qre(game, R, 0.5, SolverConfig(tolerance=1e-14)).policy
    path = [psg(game, R, (1 - t) * qre + t * 0.5, 0.5) for t in np.linspace(0, 1, 11)]
    assert path[0] < 1e-8
    assert all(b >= a - 1e-12 for a, b in zip(path, path[1:]))


def fd_check(game, kind, params, group, policy, beta, rel=1e-3):
    cfg = GapConfig(kind, 1.0)
    ev = group_gap(game, cfg, params, group, policy, beta)
    flat = params.flat()
    grad = np.concatenate([ev.grad_psi_r.ravel(), ev.grad_psi_lambda])
    h = 1e-5
    fd = np.empty_like(flat)
    for j in range(flat.size):
        e = np.zeros_like(flat)
        e[j] = h
        up = group_gap(game, cfg, params.with_flat(flat + e), group, policy, beta, with_grad=False).value
        dn = group_gap(game, cfg, params.with_flat(flat - e), group, policy, beta, with_grad=False).value
        fd[j] = (up - dn) / (2 * h)
    np.testing.assert_allclose(grad, fd, rtol=rel, atol=1e-7 * max(1.0, np.abs(fd).max()))


@pytest.mark.parametrize("kind", ["psg", "qig"])
@pytest.mark.parametrize("seed", range(3))
def test_gap_gradients_finite_difference(kind, seed):
    rng = np.random.default_rng(seed)
    game, _ = random_game(seed, num_states=3, num_actions=2, num_agents=3)
    params = random_params(rng, 3, 3, 2)
    fd_check(game, kind, params, (0, 2), random_policy(rng, 2, 3, 2), 0.5)


def test_non_member_gradient_is_zero(rng):
    game, _ = random_game(4, num_states=3, num_actions=2, num_agents=3)
    params = random_params(rng, 3, 3, 2)
    ev = group_gap(game, GapConfig("psg", 1.0), params, (0, 1), random_policy(rng, 2, 3, 2), 0.5)
    assert np.all(ev.grad_psi_r[2] == 0) and ev.grad_psi_lambda[2] == 0


def test_gradient_linear_in_concentration(rng):
    game, _ = random_game(5, num_states=3, num_actions=2)
    params = random_params(rng, 2, 3, 2)
    pi = random_policy(rng, 2, 3, 2)
    a = group_gap(game, GapConfig("psg", 3.0), params, (0, 1), pi, 0.5)
    b = group_gap(game, GapConfig("psg", 30.0), params, (0, 1), pi, 0.5)
    np.testing.assert_allclose(b.grad_psi_r, 10 * a.grad_psi_r, rtol=1e-12)
    np.testing.assert_allclose(b.grad_psi_lambda, 10 * a.grad_psi_lambda, rtol=1e-12)


def test_directional_derivative_vanishes_at_qre(rng):
    game, _ = random_game(6, num_states=3, num_actions=2)
    params = random_params(rng, 2, 3, 2, scale=0.5)
    pi = solve_qre(game, compose_group_reward(params.profiles(), (0, 1)), 0.5, SolverConfig(tolerance=1e-15)).policy
    ev = group_gap(game, GapConfig("psg", 1.0), params, (0, 1), pi, 0.5)
    d = rng.normal(size=params.flat().size)
    d /= np.linalg.norm(d)
    g = np.concatenate([ev.grad_psi_r.ravel(), ev.grad_psi_lambda])
    assert abs(g @ d) < 1e-4


@pytest.mark.parametrize("kind", ["psg", "qig"])
def test_gap_batch_matches_seatwise(kind, rng):
    game, _ = random_game(7, num_states=4, num_actions=2)
    pi = random_policy(rng, 2, 4, 2)
    rbar = rng.random((5, 2, 4, 2))
    fn = psg_seats if kind == "psg" else qig_seats
    ref = np.array([fn(game, rbar[b], pi, 0.3)[0].max() for b in range(5)])
    np.testing.assert_allclose(gap_batch(game, kind, rbar, pi, 0.3), ref, atol=1e-8)


def test_gap_config_validation():
    with pytest.raises(ValueError):
        GapConfig("foo")
    with pytest.raises(ValueError):
        GapConfig("psg", 0.0)
    assert GapConfig.default("qig").concentration == 50000.0
