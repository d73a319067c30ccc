import numpy as np
import pytest

from altruism_irl.environments import (
    COMPACT_LAYOUT,
    REFERENCE_LAYOUT,
    RandomMgConfig,
    build_kitchen,
    chef_intrinsic_reward,
    generate_random_mg,
    parse_layout,
)
from altruism_irl.environments.kitchen import DOWN, INTERACT, LEFT, RIGHT, UP, kitchen_step, swap_players
from altruism_irl.game import solve_qre
from altruism_irl.rewards import compose_group_reward

# pass a tomato over the table, cook, plate via the table, serve and deliver
SCRIPT = [
    (LEFT, RIGHT), (UP, UP), (INTERACT, RIGHT), (INTERACT, RIGHT), (DOWN, INTERACT),
    (INTERACT, INTERACT), (UP, RIGHT), (INTERACT, RIGHT), (LEFT, INTERACT), (LEFT, INTERACT),
    (LEFT, INTERACT), (LEFT, RIGHT), (LEFT, RIGHT), (LEFT, RIGHT),
]


@pytest.fixture(scope="module")
def reference():
    return build_kitchen(parse_layout(REFERENCE_LAYOUT))


def run_script(game, codec, script):
    s = int(np.argmax(game.initial_dist))
    cooks, delivers = np.zeros(2), np.zeros(2)
    for joint in script:
        for i in (0, 1):
            cooks[i] += codec.cooked(s, joint, i)
            delivers[i] += codec.delivered(s, joint, i)
        s = int(codec.next_state[s, joint[0] * 5 + joint[1]])
    return s, cooks, delivers


def test_random_mg_rows_and_moments():
    game, profiles = generate_random_mg(RandomMgConfig(num_states=5, seed=1))
    np.testing.assert_allclose(game.transition.sum(-1), 1.0, atol=1e-12)
    assert all(p.intrinsic.sum() == 2 for p in profiles)  # ceil(10% of 15)
    lams = np.array([
        p.altruism for s in range(2500)
        for p in generate_random_mg(RandomMgConfig(num_states=1, num_actions=1, seed=s))[1]
    ])
    assert abs(lams.mean()) < 3 * np.sqrt(100 / 12 / lams.size)
    assert abs(lams.var() - 100 / 12) < 3 * 100 / 12 * np.sqrt(2 / lams.size) * 1.2


def test_dirichlet_concentration_direction():
    sparse = generate_random_mg(RandomMgConfig(dirichlet_alpha=0.3, seed=0))[0]
    flat = generate_random_mg(RandomMgConfig(dirichlet_alpha=10.0, seed=0))[0]
    assert sparse.transition.max(-1).mean() > flat.transition.max(-1).mean()


def test_random_mg_validation():
    with pytest.raises(ValueError):
        RandomMgConfig(num_agents=1, num_players=2)
    with pytest.raises(ValueError):
        RandomMgConfig(num_states=1, num_actions=2, reward_sparsity=5).reward_count()


def test_reference_layout_state_space(reference):
    game, codec = reference
    assert game.num_states == codec.num_states == 1261
    assert np.all(codec.swap[codec.swap] == np.arange(codec.num_states))


def test_scripted_delivery(reference):
    game, codec = reference
    s, cooks, delivers = run_script(game, codec, SCRIPT)
    assert cooks.sum() == 1 and delivers.sum() == 1
    # player 1 both cooked and delivered: a "both" chef in seat 1 collects 2
    assert cooks[1] == 1 and delivers[1] == 1
    assert codec.describe(s)["pot"] == "empty" and codec.describe(s)["carry"] == ["nothing", "nothing"]


def test_chef_reward_kinds(reference):
    _, codec = reference
    d, c, b = (chef_intrinsic_reward(codec, k) for k in ("deliver", "cook", "both"))
    np.testing.assert_array_equal(b, np.maximum(d, c))
    assert np.all(d[:, :INTERACT] == 0) and np.all(c[:, :INTERACT] == 0)
    with pytest.raises(ValueError):
        chef_intrinsic_reward(codec, "wash")


def test_movement_rules():
    layout = parse_layout(REFERENCE_LAYOUT)
    tables = layout.tables()
    start = layout.start_cell
    base = (start, start, 0, 0, 0, 0)
    # walking into the wall below the start cell
    nxt, _, _ = kitchen_step(layout, tables, base, (DOWN, DOWN))
    assert nxt[:2] == (start, start)
    apart = ((2, 1), (2, 3), 0, 0, 0, 0)
    # both step into the shared start cell: conflict, nobody moves
    nxt, _, _ = kitchen_step(layout, tables, apart, (RIGHT, LEFT))
    assert nxt[:2] == ((2, 1), (2, 3))
    # swapping cells is blocked
    side = ((2, 1), (2, 2), 0, 0, 0, 0)
    nxt, _, _ = kitchen_step(layout, tables, side, (RIGHT, LEFT))
    assert nxt[:2] == ((2, 1), (2, 2))


def test_kitchen_determinism_and_swap_invariance():
    game_a, codec_a = build_kitchen(parse_layout(COMPACT_LAYOUT))
    game_b, codec_b = build_kitchen(parse_layout(COMPACT_LAYOUT))
    assert codec_a.states == codec_b.states
    assert (game_a.transition != game_b.transition).nnz == 0
    # swapping players commutes with the dynamics
    for s in range(0, codec_a.num_states, 17):
        for a in range(5):
            for b in range(5):
                nxt = codec_a.next_state[s, a * 5 + b]
                swapped = codec_a.next_state[codec_a.swap[s], b * 5 + a]
                assert codec_a.swap[nxt] == swapped
    assert codec_a.states[codec_a.swap[5]] == swap_players(codec_a.states[5])


def test_kitchen_qre_symmetric_under_seat_views():
    game, codec = build_kitchen(parse_layout(COMPACT_LAYOUT))
    from altruism_irl.rewards import AltruismProfile

    r = chef_intrinsic_reward(codec, "both")
    profiles = {0: AltruismProfile(r, -0.1), 1: AltruismProfile(r, -0.1)}
    R = compose_group_reward(profiles, (0, 1), game.seat_views)
    pi = solve_qre(game, R, 0.05).policy
    # identical chefs: seat 1 plays seat 0's policy in the swapped frame
    np.testing.assert_allclose(pi[1], pi[0][codec.swap], atol=1e-6)
