"""Procedural navigation tasks: constrained terrain, object placement, expert demos."""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .irl import Demonstrations
from .mdp import (
    DIRT,
    GRASS,
    ContractError,
    Environment,
    GridObject,
    GridWorld,
    InvalidGridError,
    TILE_KINDS,
    trajectory_to_json,
)
from .soft import expected_visitations, sample_trajectories, soft_value_iteration

SAMPLED = "sampled"
EXACT = "exact"

START_CELL = "start"
FREE_CELLS = "free"

DEFAULT_ADJACENCY = {DIRT: (DIRT, GRASS), GRASS: (DIRT, GRASS)}
NEIGHBOURS_4 = ((-1, 0), (0, 1), (1, 0), (0, -1))


class UnsatisfiableAdjacency(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    width: int = 8
    height: int = 8
    horizon: int = 15
    discount: float = 1.0
    num_objects: int = 3
    adjacency: dict = field(default_factory=lambda: dict(DEFAULT_ADJACENCY))
    num_train_ids: int = 100
    num_heldout_ids: int = 5
    out_of_domain: bool = False
    position: str = "none"
    # Inverse temperature of the MaxEnt expert relative to the true reward.
    expert_beta: float = 5.0
    # Where demonstrations begin: the task's start cell, or uniformly over object-free cells.
    demo_starts: str = FREE_CELLS
    max_restarts: int = 100

    def __post_init__(self):
        adj = {k: tuple(v) for k, v in dict(self.adjacency).items()}
        object.__setattr__(self, "adjacency", adj)
        if self.num_objects < 1:
            raise ValueError("num_objects must be >= 1")
        if self.demo_starts not in (START_CELL, FREE_CELLS):
            raise ValueError(f"unknown demo_starts {self.demo_starts!r}")
        for k in TILE_KINDS:
            if not adj.get(k):
                raise ValueError(f"adjacency table has no entry for tile kind {k!r}")
        for k, allowed in adj.items():
            for j in allowed:
                if k not in adj.get(j, ()):
                    raise ValueError(f"adjacency table is not symmetric: {k}->{j}")

    @property
    def num_object_ids(self) -> int:
        return self.num_train_ids + self.num_heldout_ids

    def object_pool(self) -> np.ndarray:
        if self.out_of_domain:
            return np.arange(self.num_train_ids, self.num_object_ids)
        return np.arange(self.num_train_ids)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adjacency"] = {k: list(v) for k, v in sorted(self.adjacency.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)

    def spec_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def build_env(self, grid: GridWorld) -> Environment:
        return Environment.build(grid, self.horizon, self.discount, self.num_object_ids, self.position)


@dataclass(frozen=True, eq=False)
class Task:
    task_id: int
    spec: TaskSpec
    train_env: Environment
    test_env: Environment
    demos_train: object = ()
    demos_test: object = ()
    seed: int | None = None

    def with_demos(self, train, test) -> "Task":
        return replace(self, demos_train=train, demos_test=test)


def generate_terrain(spec: TaskSpec, rng) -> str:
    """Breadth-first terrain fill honouring the 4-neighbour adjacency table."""
    rng = np.random.default_rng(rng)
    w, h = spec.width, spec.height
    kinds = sorted(spec.adjacency)
    for _ in range(spec.max_restarts):
        grid = [None] * (w * h)
        seed_cell = int(rng.integers(w * h))
        queue, seen = deque([seed_cell]), {seed_cell}
        ok = True
        while queue:
            c = queue.popleft()
            r, col = divmod(c, w)
            allowed = set(kinds)
            nbrs = []
            for dr, dc in NEIGHBOURS_4:
                rr, cc = r + dr, col + dc
                if 0 <= rr < h and 0 <= cc < w:
                    n = rr * w + cc
                    nbrs.append(n)
                    if grid[n] is not None:
                        allowed &= set(spec.adjacency[grid[n]])
            if not allowed:
                ok = False
                break
            options = sorted(allowed)
            grid[c] = options[int(rng.integers(len(options)))]
            for n in nbrs:
                if n not in seen:
                    seen.add(n)
                    queue.append(n)
        if ok:
            return "".join(grid)
    raise UnsatisfiableAdjacency(f"terrain generation failed after {spec.max_restarts} restarts")


def _place(spec: TaskSpec, rng: np.random.Generator, ids: np.ndarray, goal_index: int) -> GridWorld:
    terrain = generate_terrain(spec, rng)
    w, h = spec.width, spec.height
    interior = [r * w + c for r in range(1, h - 1) for c in range(1, w - 1)]
    cells = rng.choice(interior, size=len(ids), replace=False)
    objects = tuple(GridObject(int(c), int(i), k == goal_index) for k, (c, i) in enumerate(zip(cells, ids)))
    free = np.setdiff1d(np.arange(w * h), cells)
    start = int(rng.choice(free))
    return GridWorld(w, h, terrain, objects, start)


def generate_task(spec: TaskSpec, rng, task_id: int = 0) -> Task:
    """Paired train/test environments sharing the same objects at new positions."""
    rng = np.random.default_rng(rng)
    interior = max(spec.width - 2, 0) * max(spec.height - 2, 0)
    if interior < spec.num_objects:
        raise InvalidGridError(f"{spec.width}x{spec.height} grid has only {interior} interior cells")
    ids = rng.choice(spec.object_pool(), size=spec.num_objects, replace=False)
    goal = int(rng.integers(spec.num_objects))
    train = _place(spec, rng, ids, goal)
    for _ in range(100):
        test = _place(spec, rng, ids, goal)
        if {(o.cell, o.object_id) for o in test.objects} != {(o.cell, o.object_id) for o in train.objects}:
            break
    return Task(task_id, spec, spec.build_env(train), spec.build_env(test))


def demo_start_distribution(spec: TaskSpec, env: Environment) -> np.ndarray:
    if spec.demo_starts == START_CELL:
        return env.mdp.initial_dist.copy()
    p = np.ones(env.mdp.num_states)
    p[[o.cell for o in env.grid.objects]] = 0.0
    return p / p.sum()


def expert_solution(task: Task, env: Environment | None = None):
    """The expert's MaxEnt solution, started from the demonstration start distribution."""
    env = task.train_env if env is None else env
    mdp = env.mdp.with_initial(demo_start_distribution(task.spec, env))
    return soft_value_iteration(mdp, task.spec.expert_beta * env.reward)


def generate_demos(task: Task, k_train: int, rng, mode: str = SAMPLED, k_test: int | None = None) -> Task:
    """Attach expert demonstrations drawn on the train environment.

    Sampled mode draws ``k_train + k_test`` MaxEnt rollouts and splits them;
    exact mode stores the expert's visitation vector for both splits.
    """
    k_test = k_train if k_test is None else k_test
    if k_train < 1 or k_test < 1:
        raise ContractError("at least one demonstration per split is required")
    env = task.train_env
    sol = expert_solution(task)
    if mode == EXACT:
        d = Demonstrations.exact(env.mdp, expected_visitations(env.mdp, sol), sol.start_dist)
        return task.with_demos(d, d)
    if mode != SAMPLED:
        raise ValueError(f"unknown demonstration mode {mode!r}")
    trajs = sample_trajectories(env.mdp, sol, k_train + k_test, rng)
    return task.with_demos(trajs[:k_train], trajs[k_train:])


SPLITS = {"train": 0, "val": 1, "test": 2}


def make_task(spec: TaskSpec, seed: int, split: str, index: int, k_train: int, k_test: int | None = None,
              mode: str = SAMPLED, task_id: int | None = None) -> Task:
    """Task ``index`` of a split, drawn from its own ``(seed, split, index)`` stream."""
    rng = np.random.default_rng([seed, 10 + SPLITS[split], index])
    t = generate_task(spec, rng, index if task_id is None else task_id)
    return replace(generate_demos(t, k_train, rng, mode, k_test), seed=seed)


def make_tasks(spec: TaskSpec, count: int, seed: int, split: str, k_train: int, k_test: int | None = None,
               mode: str = SAMPLED, first_id: int = 0) -> list[Task]:
    """``count`` tasks, each generated from its own ``(seed, split, index)`` stream."""
    return [make_task(spec, seed, split, i, k_train, k_test, mode, first_id + i) for i in range(count)]


def reaches_goal(env: Environment, traj) -> bool:
    """Whether the trajectory enters the goal cell at any step."""
    t = np.asarray(traj)
    landed = env.mdp.next_state[t[:, 0], t[:, 1]]
    return bool(np.any(landed == env.grid.goal_cell) or t[0, 0] == env.grid.goal_cell)


# -- bundles --------------------------------------------------------------------

def _demos_to_json(demos) -> dict:
    if isinstance(demos, Demonstrations):
        return {"mode": EXACT, "visitations": [format(float(v), ".17g") for v in demos.visitations],
                "start_dist": [format(float(v), ".17g") for v in demos.start_dist]}
    return {"mode": SAMPLED, "trajectories": [trajectory_to_json(t) for t in demos]}


def _demos_from_json(d: dict, env: Environment):
    if d["mode"] == EXACT:
        return Demonstrations.exact(env.mdp, np.array([float(v) for v in d["visitations"]]),
                                    np.array([float(v) for v in d["start_dist"]]))
    return [np.asarray(t, dtype=np.int64).reshape(-1, 2) for t in d["trajectories"]]


def task_documents(task: Task) -> dict[str, dict]:
    return {
        "task.json": {
            "task_id": task.task_id,
            "spec": task.spec.to_dict(),
            "train_env": task.train_env.grid.to_dict(),
            "test_env": task.test_env.grid.to_dict(),
        },
        "demos.json": {"train": _demos_to_json(task.demos_train), "test": _demos_to_json(task.demos_test)},
        "meta.json": {"seed": task.seed, "spec_hash": task.spec.spec_hash()},
    }


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def save_task(task: Task, directory, extra_meta: dict | None = None) -> str:
    """Write a task bundle; returns the sha256 over the bundle's files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    docs = task_documents(task)
    if extra_meta:
        docs["meta.json"].update(extra_meta)
    h = hashlib.sha256()
    for name in sorted(docs):
        text = dump_json(docs[name])
        (d / name).write_text(text)
        h.update(name.encode() + text.encode())
    return h.hexdigest()


def bundle_hash(directory) -> str:
    d = Path(directory)
    h = hashlib.sha256()
    for name in ("demos.json", "meta.json", "task.json"):
        h.update(name.encode() + (d / name).read_bytes())
    return h.hexdigest()


def load_task(directory) -> Task:
    d = Path(directory)
    task_doc = json.loads((d / "task.json").read_text())
    demos_doc = json.loads((d / "demos.json").read_text())
    meta = json.loads((d / "meta.json").read_text())
    spec = TaskSpec.from_dict(task_doc["spec"])
    train = spec.build_env(GridWorld.from_dict(task_doc["train_env"]))
    test = spec.build_env(GridWorld.from_dict(task_doc["test_env"]))
    return Task(
        int(task_doc["task_id"]), spec, train, test,
        _demos_from_json(demos_doc["train"], train), _demos_from_json(demos_doc["test"], train),
        meta.get("seed"),
    )
