import numpy as np
import pytest

from latent_rpg.core.envs import (
    ENV_IDS,
    MAZE_ROOM_SIZE,
    MOVE3_OBSTACLES,
    NAV4_OBSTACLES,
    EnvSpec,
    ObstacleSet,
    bandit_a_reward,
    bandit_b_reward,
    coverage,
    make_env,
    maze_step,
    move_step,
    move_terminal_reward,
    room_ids,
)
from latent_rpg.core.errors import EnvError
from latent_rpg.core.estimators import check_regularity
from latent_rpg.core.graph import backward, const, parameter, reduce_sum


def test_registry_covers_required_ids():
    for env_id in ("bandit_a", "bandit_b", "move1", "move2", "move3", "maze"):
        assert env_id in ENV_IDS
    with pytest.raises(EnvError):
        make_env("cartpole")


def test_spec_rejects_bad_horizon_and_bounds():
    with pytest.raises(EnvError):
        EnvSpec("x", 1, 1, 0, ((-1.0, 1.0),))
    with pytest.raises(EnvError):
        EnvSpec("x", 1, 1, 1, ((1.0, -1.0),))


def test_obstacles_need_positive_radius():
    with pytest.raises(EnvError):
        ObstacleSet(circles=(((0.0, 0.0), 0.0),))


def test_bandit_a_plateau_and_global_mode():
    grid = np.linspace(-1.0, 1.0, 100001)
    values = bandit_a_reward(const(grid)).value
    assert np.all(values[grid > 0.3] == -0.5)
    assert grid[np.argmax(values)] == pytest.approx(-0.6, abs=1e-4)
    assert np.max(np.abs(values)) <= 1.5


def test_bandit_b_shape():
    grid = np.linspace(-1.0, 1.0, 100001)
    values = bandit_b_reward(const(grid)).value
    assert bandit_b_reward(const(np.array([0.0]))).value[0] == pytest.approx(0.0, abs=0.01)
    left = values[grid < -0.15].max()
    right = values[grid > 0.0].max()
    assert left > right
    # jump of 0.6 at -0.85
    below = bandit_b_reward(const(np.array([-0.85 - 1e-9]))).value[0]
    above = bandit_b_reward(const(np.array([-0.85 + 1e-9]))).value[0]
    assert above - below == pytest.approx(0.6, abs=1e-6)


def test_bandit_rejects_out_of_bounds_action():
    env = make_env("bandit_a")
    with pytest.raises(EnvError):
        env.step(env.initial_state(1), const([[1.5]]), 0)


def test_move_zero_action_keeps_state():
    state = const(np.array([[0.2, -0.4]]))
    out = move_step(state, const(np.zeros((1, 2))), NAV4_OBSTACLES)
    np.testing.assert_allclose(out.value, state.value)


def test_head_on_reflection_mirrors_and_preserves_length():
    obstacles = ObstacleSet(circles=(((0.0, 0.0), 0.1),))
    state = const(np.array([[-0.2, 0.0]]))
    action = const(np.array([[0.12, 0.0]]))
    out = move_step(state, action, obstacles).value
    # reaches x = -0.1 after 0.1, bounces back 0.02
    np.testing.assert_allclose(out, [[-0.12, 0.0]], atol=1e-12)
    travelled = abs(-0.1 - (-0.2)) + abs(out[0, 0] - (-0.1))
    assert travelled == pytest.approx(0.12, abs=1e-12)


def test_grazing_path_is_pure_translation():
    obstacles = ObstacleSet(circles=(((0.0, 0.0), 0.1),))
    state = const(np.array([[-0.2, 0.3]]))
    action = const(np.array([[0.12, 0.0]]))
    np.testing.assert_allclose(move_step(state, action, obstacles).value, [[-0.08, 0.3]])


def test_move_peak_values():
    r = move_terminal_reward(const(np.array([[0.7, 0.7]])), "move2").value[0]
    assert r == pytest.approx(1.0, abs=1e-3)
    far = move_terminal_reward(const(np.array([[-1.0, 1.0]])), "move2").value[0]
    assert far == pytest.approx(0.0, abs=1e-6)


def test_move1_flat_disc_has_zero_gradient():
    s = parameter(np.array([[0.05, -0.1]]))
    grads = backward(reduce_sum(move_terminal_reward(s, "move1")))
    np.testing.assert_array_equal(grads[s], np.zeros((1, 2)))


def test_obstacles_must_not_overlap():
    with pytest.raises(EnvError):
        ObstacleSet(circles=(((0.0, 0.0), 0.12), ((0.2, 0.0), 0.12)))


def _clearance(states: np.ndarray, obstacles: ObstacleSet) -> float:
    return min(
        float(np.min(np.linalg.norm(states - np.asarray(center), axis=-1) - radius))
        for center, radius in obstacles.circles
    )


@pytest.mark.parametrize("env_id,obstacles,drift", [("move3", MOVE3_OBSTACLES, (0.0, 0.08)), ("nav4", NAV4_OBSTACLES, (0.06, 0.06))])
def test_random_rollouts_never_enter_an_obstacle(env_id, obstacles, drift):
    env = make_env(env_id)
    rng = np.random.default_rng(11)
    batch = 4000
    state = env.initial_state(batch)
    for t in range(env.spec.horizon):
        action = np.clip(rng.normal(drift, 0.08, size=(batch, 2)), -0.12, 0.12)
        state = env.step(state, const(action), t).next_state
        assert _clearance(state.value, obstacles) >= -1e-9


def test_long_steps_through_a_narrow_gap_bounce_instead_of_tunnelling():
    obstacles = ObstacleSet(circles=(((-0.13, 0.0), 0.12), ((0.13, 0.0), 0.12)))
    rng = np.random.default_rng(5)
    starts = rng.uniform((-0.4, -0.3), (0.4, 0.3), size=(20000, 2))
    starts = starts[[_clearance(p[None], obstacles) > 1e-6 for p in starts]]
    actions = rng.uniform(-0.17, 0.17, size=starts.shape)
    out = move_step(const(starts), const(actions), obstacles).value
    assert _clearance(out, obstacles) >= -1e-9


def test_move1_reward_is_continuous_and_declared_smooth():
    angles = np.linspace(0.0, 2.0 * np.pi, 256, endpoint=False)
    ring = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    for radius in (0.3, 0.4):
        inner = move_terminal_reward(const((radius - 1e-7) * ring), "move1").value
        outer = move_terminal_reward(const((radius + 1e-7) * ring), "move1").value
        assert np.max(np.abs(outer - inner)) < 1e-6
    env = make_env("move1")
    assert not env.spec.discontinuous
    assert check_regularity(env).jump_candidates == []


def test_move_terminal_gradient_matches_finite_differences():
    env = make_env("move2")
    rng = np.random.default_rng(3)
    actions = [rng.uniform(0.0, 0.06, size=(1, 2)) for _ in range(env.spec.horizon)]
    actions[0] = np.array([[0.1, 0.1]])

    def total(acts):
        state = env.initial_state(1)
        reward = 0.0
        for t, a in enumerate(acts):
            result = env.step(state, a if not isinstance(a, np.ndarray) else const(a), t)
            reward = reward + result.reward
            state = result.next_state
        return reward

    leaf = parameter(actions[0])
    root = reduce_sum(total([leaf] + actions[1:]))
    analytic = backward(root)[leaf]
    h = 1e-6
    numeric = np.zeros((1, 2))
    for j in range(2):
        up, down = actions[0].copy(), actions[0].copy()
        up[0, j] += h
        down[0, j] -= h
        numeric[0, j] = (total([up] + actions[1:]).value.sum() - total([down] + actions[1:]).value.sum()) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-9)


def test_maze_wall_blocks_and_passage_admits():
    # wall at x = -0.2 between the center column and its left neighbour
    blocked = maze_step(np.array([[-0.15, 0.1]]), np.array([[-0.1, 0.0]]))
    np.testing.assert_allclose(blocked, [[-0.15, 0.1]])
    through = maze_step(np.array([[-0.15, 0.0]]), np.array([[-0.1, 0.0]]))
    np.testing.assert_allclose(through, [[-0.25, 0.0]])
    still = maze_step(np.array([[0.3, -0.3]]), np.zeros((1, 2)))
    np.testing.assert_allclose(still, [[0.3, -0.3]])


def test_coverage_counts_rooms():
    assert coverage(np.zeros((10, 2))) == 1
    centers = -1.0 + MAZE_ROOM_SIZE * (np.arange(5) + 0.5)
    every_room = np.array([[x, y] for x in centers for y in centers])
    assert coverage(every_room) == 25


def test_coverage_matches_per_state_lookup_on_random_walk():
    rng = np.random.default_rng(0)
    env = make_env("maze")
    state = np.zeros((1, 2))
    visited = [state[0]]
    for _ in range(1000):
        state = maze_step(state, rng.uniform(-0.1, 0.1, size=(1, 2)))
        visited.append(state[0])
    visited = np.array(visited)
    brute = {(int(np.floor((y + 1) / 0.4).clip(0, 4)), int(np.floor((x + 1) / 0.4).clip(0, 4))) for x, y in visited}
    assert coverage(visited) == len(brute)
    assert env.spec.state_bounds == (-1.0, 1.0)


def test_room_ids_reject_states_outside_arena():
    with pytest.raises(EnvError):
        room_ids(np.array([[1.5, 0.0]]))


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
