import json

import numpy as np
import pytest

from mandril.mdp import (
    ACTIONS,
    ContractError,
    GridObject,
    GridWorld,
    InvalidGridError,
    TabularMDP,
    category_features,
    compile_gridworld,
    true_reward,
    validate_trajectory,
)
from mandril.soft import sample_trajectories, soft_value_iteration
from conftest import micro_grid


def brute_successor(width, height, cell, action):
    """Independent adjacency: enumerate all 8 neighbours by name."""
    r, c = divmod(cell, width)
    moves = {"N": (-1, 0), "NE": (-1, 1), "E": (0, 1), "SE": (1, 1),
             "S": (1, 0), "SW": (1, -1), "W": (0, -1), "NW": (-1, -1)}
    dr, dc = moves[["N", "NE", "E", "SE", "S", "SW", "W", "NW"][action]]
    rr, cc = r + dr, c + dc
    if rr < 0 or rr >= height or cc < 0 or cc >= width:
        return cell
    return rr * width + cc


def test_single_cell_self_transitions():
    g = GridWorld(1, 1, "d", (GridObject(0, 0, True),), 0)
    mdp, _ = compile_gridworld(g, 3)
    assert mdp.num_states == 1 and mdp.num_actions == 8
    assert np.all(mdp.next_state == 0)


def test_twenty_by_twenty_has_400_states():
    g = GridWorld(20, 20, "d" * 400, (GridObject(21, 0, True),), 0)
    mdp, feats = compile_gridworld(g, 15)
    assert mdp.num_states == 400
    assert feats.values.shape[0] == 400


def test_three_by_three_adjacency_matches_enumeration(grid3):
    mdp, _ = compile_gridworld(grid3, 4)
    for s in range(9):
        for a in range(8):
            assert mdp.next_state[s, a] == brute_successor(3, 3, s, a)
    # centre, NE -> (row-1, col+1)
    assert mdp.next_state[4, 1] == grid3.cell(0, 2)


def test_interior_successors_distinct_and_edges_self_loop():
    g = GridWorld(5, 4, "d" * 20, (GridObject(6, 0, True),), 0)
    mdp, _ = compile_gridworld(g, 2)
    for s in range(20):
        r, c = divmod(s, 5)
        interior = 0 < r < 3 and 0 < c < 4
        succ = mdp.next_state[s]
        if interior:
            assert len(set(succ.tolist())) == 8
        for a, (dr, dc) in enumerate(ACTIONS):
            if not (0 <= r + dr < 4 and 0 <= c + dc < 5):
                assert succ[a] == s


def test_compile_is_deterministic(grid3):
    m1, f1 = compile_gridworld(grid3, 4)
    m2, f2 = compile_gridworld(grid3, 4)
    assert m1.next_state.tobytes() == m2.next_state.tobytes()
    assert m1.initial_dist.tobytes() == m2.initial_dist.tobytes()
    assert f1.values.tobytes() == f2.values.tobytes()


def test_initial_dist_is_point_mass_on_start(grid3):
    mdp, _ = compile_gridworld(micro_grid(start=7), 4)
    assert mdp.initial_dist[7] == 1.0 and mdp.initial_dist.sum() == 1.0


def test_feature_invariants(grid3):
    _, f = compile_gridworld(grid3, 4)
    assert np.all(f.group("terrain").sum(axis=1) == 1)
    assert f.group("goal").sum() == 1 and f.group("goal")[grid3.goal_cell, 0] == 1
    assert f.group("object")[2, 1] == 1 and f.group("object").sum() == 2
    assert f.observation().shape[1] == f.num_channels - 1


@pytest.mark.parametrize("w,h", [(0, 3), (3, 0)])
def test_zero_dimension_rejected(w, h):
    with pytest.raises(InvalidGridError):
        GridWorld(w, h, "", (GridObject(0, 0, True),), 0)


def test_grid_invariants_enforced():
    with pytest.raises(InvalidGridError):
        GridWorld(2, 2, "dddd", (GridObject(0, 0, True), GridObject(0, 1, False)), 1)
    with pytest.raises(InvalidGridError):
        GridWorld(2, 2, "dddd", (GridObject(0, 0, False),), 1)
    with pytest.raises(InvalidGridError):
        GridWorld(2, 2, "dddd", (GridObject(0, 0, True), GridObject(1, 1, True)), 1)
    with pytest.raises(InvalidGridError):
        GridWorld(2, 2, "dxdd", (GridObject(0, 0, True),), 1)


def test_mdp_invariants_enforced():
    with pytest.raises(ContractError):
        TabularMDP(np.array([[0, 2]]), np.ones(1), 2)
    with pytest.raises(ContractError):
        TabularMDP(np.array([[0]]), np.array([0.9]), 2)
    with pytest.raises(ContractError):
        TabularMDP(np.array([[0]]), np.ones(1), 0)


def test_true_reward_costs(grid3):
    mdp, _ = compile_gridworld(grid3, 4)
    r = true_reward(grid3, mdp).reshape(9, 8)
    # from cell 0: E lands on 1 (grass), SE lands on 4 (goal), S lands on 3 (dirt)
    assert r[0, 2] == -2.0
    assert r[0, 3] == 0.0
    assert r[0, 4] == -1.0
    # from cell 1: E lands on obstacle at 2
    assert r[1, 2] == -8.0


def test_true_reward_matches_scripted_table(grid3):
    mdp, _ = compile_gridworld(grid3, 4)
    # independent pass over the grid description
    table = {}
    for row in range(3):
        for col in range(3):
            cell = row * 3 + col
            kind = grid3.terrain[cell]
            cost = {"d": 1, "g": 2}[kind]
            if cell == 4:
                cost = 0
            elif cell == 2:
                cost = 8
            table[cell] = -cost
    expected = np.array([[table[brute_successor(3, 3, s, a)] for a in range(8)] for s in range(9)])
    np.testing.assert_array_equal(true_reward(grid3, mdp), expected.ravel())


def test_linear_category_weights_reproduce_true_reward(grid3):
    mdp, _ = compile_gridworld(grid3, 4)
    cell_r = category_features(grid3) @ np.array([-1.0, -2.0, -8.0, 0.0])
    np.testing.assert_array_equal(cell_r[mdp.next_state].ravel(), true_reward(grid3, mdp))


def test_validate_trajectory(mdp3):
    assert validate_trajectory(mdp3, [])
    good = [(0, 2), (1, 4), (4, 0)]
    assert validate_trajectory(mdp3, good)
    assert not validate_trajectory(mdp3, [(0, 2), (3, 4)])
    assert not validate_trajectory(mdp3, good * 2)  # longer than the horizon
    assert not validate_trajectory(mdp3, [(0, 9)])


def test_sampled_rollouts_validate(mdp3, grid3):
    sol = soft_value_iteration(mdp3, true_reward(grid3, mdp3))
    for t in sample_trajectories(mdp3, sol, 200, 3):
        assert validate_trajectory(mdp3, t)


def test_grid_json_round_trip(grid3):
    d = json.loads(grid3.to_json())
    assert set(d) == {"width", "height", "terrain", "objects", "start"}
    assert d["objects"][0] == {"cell": 4, "id": 0, "goal": True}
    assert GridWorld.from_json(grid3.to_json()) == grid3
