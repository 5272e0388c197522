import json

import numpy as np
import pytest

from mandril.irl import Demonstrations
from mandril.mdp import DIRT, GRASS, InvalidGridError, validate_trajectory
from mandril.tasks import (
    EXACT,
    START_CELL,
    TaskSpec,
    UnsatisfiableAdjacency,
    bundle_hash,
    generate_demos,
    generate_task,
    generate_terrain,
    load_task,
    make_tasks,
    reaches_goal,
    save_task,
)
from mandril.soft import expected_visitations, soft_value_iteration

# recorded once from the seeded generators below
BOTH_KINDS_IN_1000 = 1000
EXPERT_REACH_HITS = 1964  # of 2000 sampled rollouts


def adjacent_pairs(terrain, w, h):
    for r in range(h):
        for c in range(w):
            if c + 1 < w:
                yield terrain[r * w + c], terrain[r * w + c + 1]
            if r + 1 < h:
                yield terrain[r * w + c], terrain[(r + 1) * w + c]


def test_dirt_only_table_gives_all_dirt():
    spec = TaskSpec(adjacency={DIRT: (DIRT,), GRASS: (GRASS,)})
    for s in range(20):
        t = generate_terrain(spec, s)
        assert len(set(t)) == 1


def test_checkerboard_table_is_respected_exhaustively():
    table = {DIRT: (GRASS,), GRASS: (DIRT,)}
    spec = TaskSpec(width=7, height=5, adjacency=table)
    for s in range(30):
        t = generate_terrain(spec, s)
        for a, b in adjacent_pairs(t, 7, 5):
            assert b in table[a]


def test_default_table_mixes_kinds():
    spec = TaskSpec()
    both = sum(len(set(generate_terrain(spec, np.random.default_rng([s, 77])))) == 2 for s in range(1000))
    assert both == BOTH_KINDS_IN_1000
    assert both >= 990


def test_restart_budget_exhaustion():
    with pytest.raises(UnsatisfiableAdjacency):
        generate_terrain(TaskSpec(max_restarts=0), 0)


def test_asymmetric_table_rejected():
    with pytest.raises(ValueError):
        TaskSpec(adjacency={DIRT: (DIRT, GRASS), GRASS: (GRASS,)})
    with pytest.raises(ValueError):
        TaskSpec(num_objects=0)


def test_task_invariants():
    spec = TaskSpec()
    for s in range(25):
        t = generate_task(spec, s, s)
        a, b = t.train_env.grid, t.test_env.grid
        assert sorted(o.object_id for o in a.objects) == sorted(o.object_id for o in b.objects)
        assert {(o.cell, o.object_id) for o in a.objects} != {(o.cell, o.object_id) for o in b.objects}
        for g in (a, b):
            assert sum(o.goal for o in g.objects) == 1
            for o in g.objects:
                r, c = g.rowcol(o.cell)
                assert 0 < r < 7 and 0 < c < 7
                assert o.object_id < spec.num_train_ids
            assert g.start not in {o.cell for o in g.objects}
        goal_ids = {o.object_id for o in a.objects if o.goal}
        assert goal_ids == {o.object_id for o in b.objects if o.goal}


def test_out_of_domain_uses_heldout_ids():
    spec = TaskSpec(out_of_domain=True)
    for s in range(10):
        ids = [o.object_id for o in generate_task(spec, s).train_env.grid.objects]
        assert all(100 <= i < 105 for i in ids)


def test_single_object_has_no_obstacle_costs():
    t = generate_task(TaskSpec(num_objects=1), 3)
    costs = t.train_env.grid.cell_costs()
    assert set(np.unique(costs)) <= {0.0, 1.0, 2.0}


def test_grid_too_small_for_objects():
    with pytest.raises(InvalidGridError):
        generate_task(TaskSpec(width=3, height=3, num_objects=2), 0)


def test_same_seed_same_bytes(tmp_path):
    spec = TaskSpec()
    a = make_tasks(spec, 2, 5, "train", 2)
    b = make_tasks(spec, 2, 5, "train", 2)
    ha = [save_task(t, tmp_path / f"a{i}") for i, t in enumerate(a)]
    hb = [save_task(t, tmp_path / f"b{i}") for i, t in enumerate(b)]
    assert ha == hb
    for i in range(2):
        for name in ("task.json", "demos.json", "meta.json"):
            assert (tmp_path / f"a{i}" / name).read_bytes() == (tmp_path / f"b{i}" / name).read_bytes()


def test_demo_counts_and_validity():
    spec = TaskSpec()
    t = make_tasks(spec, 1, 0, "train", 1)[0]
    assert len(t.demos_train) == 1 and len(t.demos_test) == 1
    t = make_tasks(spec, 3, 0, "train", 6, 2)
    for task in t:
        assert len(task.demos_train) == 6 and len(task.demos_test) == 2
        for d in list(task.demos_train) + list(task.demos_test):
            assert len(d) == spec.horizon and validate_trajectory(task.train_env.mdp, d)
            assert d[0][0] not in {o.cell for o in task.train_env.grid.objects}


def test_start_cell_demos():
    spec = TaskSpec(demo_starts=START_CELL)
    t = make_tasks(spec, 1, 0, "train", 5)[0]
    assert all(d[0][0] == t.train_env.grid.start for d in t.demos_train)


def test_exact_mode_stores_expert_visitations():
    spec = TaskSpec()
    t = generate_demos(generate_task(spec, 4), 1, 0, EXACT)
    assert isinstance(t.demos_train, Demonstrations)
    env = t.train_env
    mdp = env.mdp.with_initial(t.demos_train.start_dist)
    mu = expected_visitations(mdp, soft_value_iteration(mdp, spec.expert_beta * env.reward))
    np.testing.assert_array_equal(t.demos_train.visitations, mu)


def test_expert_reaches_goal():
    spec = TaskSpec()
    tasks = make_tasks(spec, 40, 0, "val", 25, 25)
    hits = sum(reaches_goal(t.train_env, d) for t in tasks for d in list(t.demos_train) + list(t.demos_test))
    assert hits == EXPERT_REACH_HITS
    assert hits / 2000 >= 0.95


def test_reaches_goal():
    t = generate_task(TaskSpec(), 1)
    env = t.train_env
    goal = env.grid.goal_cell
    s = goal + 1 if goal % 8 < 7 else goal - 1
    a = 6 if goal % 8 < 7 else 2  # W or E back onto the goal
    assert reaches_goal(env, [(s, a)])
    assert not reaches_goal(env, [(0, 0)])


@pytest.mark.parametrize("mode", ["sampled", "exact"])
def test_bundle_round_trip(tmp_path, mode):
    spec = TaskSpec(width=6, height=6)
    t = generate_demos(generate_task(spec, 9, 4), 3, 1, mode)
    h = save_task(t, tmp_path / "b")
    assert h == bundle_hash(tmp_path / "b")
    meta = json.loads((tmp_path / "b" / "meta.json").read_text())
    assert meta["spec_hash"] == spec.spec_hash()
    u = load_task(tmp_path / "b")
    assert u.task_id == 4 and u.spec == spec
    assert u.train_env.grid == t.train_env.grid and u.test_env.grid == t.test_env.grid
    if mode == "exact":
        assert u.demos_train.visitations.tobytes() == t.demos_train.visitations.tobytes()
    else:
        assert all(np.array_equal(a, b) for a, b in zip(u.demos_train, t.demos_train))
    assert save_task(u, tmp_path / "c") == h
