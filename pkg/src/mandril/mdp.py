"""Tabular MDPs and the gridworld compiler.

Cells are indexed row-major (``cell = row * width + col``). The eight actions
move to the 8-connected neighbours in clockwise order starting at north; a move
that would leave the grid keeps the agent in place.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

DIRT = "d"
GRASS = "g"
TILE_KINDS = (DIRT, GRASS)

# (d_row, d_col) for N, NE, E, SE, S, SW, W, NW
ACTIONS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))
ACTION_NAMES = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")

TILE_COST = {DIRT: 1.0, GRASS: 2.0}
OBSTACLE_COST = 8.0
GOAL_COST = 0.0

DEFAULT_NUM_OBJECT_IDS = 105  # 100 meta-train ids + 5 held out


class InvalidGridError(ValueError):
    pass


class ContractError(ValueError):
    """Inputs violate an operation's preconditions (shapes, ranges, emptiness)."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite-horizon MDP with deterministic transitions."""

    next_state: np.ndarray  # (S, A) int
    initial_dist: np.ndarray  # (S,)
    horizon: int
    discount: float = 1.0

    def __post_init__(self):
        nxt = np.asarray(self.next_state, dtype=np.int64)
        p0 = np.asarray(self.initial_dist, dtype=np.float64)
        if nxt.ndim != 2 or nxt.shape[0] < 1 or nxt.shape[1] < 1:
            raise ContractError("next_state must be a non-empty (S, A) table")
        S = nxt.shape[0]
        if nxt.min() < 0 or nxt.max() >= S:
            raise ContractError("next_state entries must lie in [0, num_states)")
        if p0.shape != (S,):
            raise ContractError(f"initial_dist must have shape ({S},)")
        if p0.min() < 0 or abs(p0.sum() - 1.0) > 1e-12:
            raise ContractError("initial_dist must be a probability vector")
        if int(self.horizon) < 1:
            raise ContractError("horizon must be >= 1")
        if not 0.0 <= float(self.discount) <= 1.0:
            raise ContractError("discount must lie in [0, 1]")
        object.__setattr__(self, "next_state", _frozen(nxt))
        object.__setattr__(self, "initial_dist", _frozen(p0))
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def num_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def num_actions(self) -> int:
        return self.next_state.shape[1]

    @property
    def reward_size(self) -> int:
        return self.num_states * self.num_actions

    def with_initial(self, initial_dist) -> "TabularMDP":
        return TabularMDP(self.next_state, initial_dist, self.horizon, self.discount)

    def time_weights(self) -> np.ndarray:
        """``gamma**(t-1)`` for t = 1..T."""
        return self.discount ** np.arange(self.horizon, dtype=np.float64)


@dataclass(frozen=True)
class GridObject:
    cell: int
    object_id: int
    goal: bool = False


@dataclass(frozen=True)
class GridWorld:
    width: int
    height: int
    terrain: str  # row-major string of 'd' / 'g'
    objects: tuple[GridObject, ...]
    start: int

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.width < 1 or self.height < 1:
            raise InvalidGridError(f"grid dimensions must be positive, got {self.width}x{self.height}")
        n = self.width * self.height
        if len(self.terrain) != n or any(c not in TILE_KINDS for c in self.terrain):
            raise InvalidGridError("terrain must be a row-major string of 'd'/'g' of length width*height")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise InvalidGridError("object cells must be distinct")
        if any(not 0 <= c < n for c in cells):
            raise InvalidGridError("object cell out of bounds")
        if sum(o.goal for o in self.objects) != 1:
            raise InvalidGridError("exactly one object must be the goal")
        if not 0 <= self.start < n:
            raise InvalidGridError("start cell out of bounds")

    @property
    def num_cells(self) -> int:
        return self.width * self.height

    @property
    def goal_cell(self) -> int:
        return next(o.cell for o in self.objects if o.goal)

    def cell(self, row: int, col: int) -> int:
        return row * self.width + col

    def rowcol(self, cell: int) -> tuple[int, int]:
        return divmod(cell, self.width)

    def cell_costs(self) -> np.ndarray:
        """Per-cell cost of stepping onto the cell."""
        cost = np.array([TILE_COST[c] for c in self.terrain])
        for o in self.objects:
            cost[o.cell] = GOAL_COST if o.goal else OBSTACLE_COST
        return cost

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "terrain": self.terrain,
            "objects": [{"cell": o.cell, "id": o.object_id, "goal": o.goal} for o in self.objects],
            "start": self.start,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridWorld":
        objs = tuple(GridObject(int(o["cell"]), int(o["id"]), bool(o["goal"])) for o in d["objects"])
        return cls(int(d["width"]), int(d["height"]), str(d["terrain"]), objs, int(d["start"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "GridWorld":
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True, eq=False)
class FeatureTensor:
    """Per-cell feature channels.

    ``values`` has shape (num_states, num_channels). ``groups`` maps a group name
    to its channel slice. The goal group is privileged information: reward
    models read :meth:`observation` which leaves it out.
    """

    values: np.ndarray
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(np.asarray(self.values, dtype=np.float64)))

    @property
    def num_channels(self) -> int:
        return self.values.shape[1]

    def group(self, name: str) -> np.ndarray:
        return self.values[:, self.groups[name]]

    def observation(self, include_goal: bool = False) -> np.ndarray:
        keep = [n for n in self.groups if include_goal or n != "goal"]
        return np.concatenate([self.group(n) for n in keep], axis=1)


def successor_table(width: int, height: int) -> np.ndarray:
    nxt = np.empty((width * height, len(ACTIONS)), dtype=np.int64)
    for r in range(height):
        for c in range(width):
            s = r * width + c
            for a, (dr, dc) in enumerate(ACTIONS):
                rr, cc = r + dr, c + dc
                nxt[s, a] = rr * width + cc if 0 <= rr < height and 0 <= cc < width else s
    return nxt


def grid_features(
    grid: GridWorld, num_object_ids: int = DEFAULT_NUM_OBJECT_IDS, position: str = "none"
) -> FeatureTensor:
    """Terrain one-hot, object presence, object-identity one-hot, optional position code, goal indicator.

    The presence channel marks every object cell regardless of identity, the
    one property all objects share.

    ``position`` is ``"none"``, ``"rowcol"`` (one-hot row plus one-hot column)
    or ``"onehot"`` (one channel per cell).
    """
    n = grid.num_cells
    terrain = np.zeros((n, len(TILE_KINDS)))
    for i, c in enumerate(grid.terrain):
        terrain[i, TILE_KINDS.index(c)] = 1.0
    ids = np.zeros((n, num_object_ids))
    goal = np.zeros((n, 1))
    for o in grid.objects:
        if not 0 <= o.object_id < num_object_ids:
            raise InvalidGridError(f"object id {o.object_id} outside [0, {num_object_ids})")
        ids[o.cell, o.object_id] = 1.0
        if o.goal:
            goal[o.cell, 0] = 1.0
    occupied = ids.sum(axis=1, keepdims=True)
    blocks = [("terrain", terrain), ("occupied", occupied), ("object", ids)]
    if position == "rowcol":
        rows, cols = np.divmod(np.arange(n), grid.width)
        pos = np.zeros((n, grid.height + grid.width))
        pos[np.arange(n), rows] = 1.0
        pos[np.arange(n), grid.height + cols] = 1.0
        blocks.append(("position", pos))
    elif position == "onehot":
        blocks.append(("position", np.eye(n)))
    elif position != "none":
        raise ValueError(f"unknown position encoding {position!r}")
    blocks.append(("goal", goal))
    groups, start = {}, 0
    for name, b in blocks:
        groups[name] = slice(start, start + b.shape[1])
        start += b.shape[1]
    return FeatureTensor(np.concatenate([b for _, b in blocks], axis=1), groups)


def compile_gridworld(
    grid: GridWorld,
    horizon: int,
    discount: float = 1.0,
    num_object_ids: int = DEFAULT_NUM_OBJECT_IDS,
    position: str = "none",
) -> tuple[TabularMDP, FeatureTensor]:
    if grid.width < 1 or grid.height < 1:
        raise InvalidGridError("grid dimensions must be positive")
    p0 = np.zeros(grid.num_cells)
    p0[grid.start] = 1.0
    mdp = TabularMDP(successor_table(grid.width, grid.height), p0, horizon, discount)
    return mdp, grid_features(grid, num_object_ids, position)


def true_reward(grid: GridWorld, mdp: TabularMDP) -> np.ndarray:
    """Reward of (s, a) is minus the cost of the cell the move lands on."""
    return -grid.cell_costs()[mdp.next_state].ravel()


def category_features(grid: GridWorld) -> np.ndarray:
    """Mutually exclusive indicators (dirt, grass, obstacle, goal) per cell.

    A linear reward with weights (-1, -2, -8, 0) over these reproduces
    :func:`true_reward`.
    """
    f = np.zeros((grid.num_cells, 4))
    for i, c in enumerate(grid.terrain):
        f[i, TILE_KINDS.index(c)] = 1.0
    for o in grid.objects:
        f[o.cell] = 0.0
        f[o.cell, 3 if o.goal else 2] = 1.0
    return f


def as_trajectory(traj: Sequence) -> np.ndarray:
    """Normalise a sequence of (state, action) pairs to an (L, 2) int array."""
    a = np.asarray(traj, dtype=np.int64)
    if a.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ContractError("a trajectory is a sequence of (state, action) pairs")
    return a


def validate_trajectory(mdp: TabularMDP, traj: Sequence) -> bool:
    try:
        t = as_trajectory(traj)
    except (ContractError, ValueError, TypeError):
        return False
    if len(t) > mdp.horizon:
        return False
    if len(t) == 0:
        return True
    s, a = t[:, 0], t[:, 1]
    if s.min() < 0 or s.max() >= mdp.num_states or a.min() < 0 or a.max() >= mdp.num_actions:
        return False
    return bool(np.all(mdp.next_state[s[:-1], a[:-1]] == s[1:]))


def trajectory_to_json(traj: Sequence) -> list:
    return as_trajectory(traj).tolist()


@dataclass(frozen=True, eq=False)
class Environment:
    """A gridworld together with its compiled MDP, features and true reward."""

    grid: GridWorld
    mdp: TabularMDP
    features: FeatureTensor
    reward: np.ndarray

    @classmethod
    def build(cls, grid: GridWorld, horizon: int, discount: float = 1.0,
              num_object_ids: int = DEFAULT_NUM_OBJECT_IDS, position: str = "none") -> "Environment":
        mdp, feats = compile_gridworld(grid, horizon, discount, num_object_ids, position)
        return cls(grid, mdp, feats, _frozen(true_reward(grid, mdp)))

    @cached_property
    def obs(self) -> np.ndarray:
        """Reward-model input channels (everything but the goal indicator)."""
        return _frozen(self.features.observation())
