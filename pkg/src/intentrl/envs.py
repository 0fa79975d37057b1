"""Sparse-reward maze environments: discrete grid and continuous point-mass.

Both environments are deterministic, terminate on goal entry (absorbing) or
at the horizon, and pay reward 1 exactly on entering the goal region.
Coordinates are (x, y) with (0, 0) the bottom-left cell.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError

Cell = tuple[int, int]

LAYOUT_VERSION = 1

# Grid action set: index -> (dx, dy).
GRID_ACTIONS: tuple[Cell, ...] = ((1, 0), (0, 1), (-1, 0), (0, -1))

# Point-mass action set: 8 compass headings, all of unit magnitude.
_SQ = 1.0 / math.sqrt(2.0)
COMPASS_ACTIONS: tuple[tuple[float, float], ...] = (
    (1.0, 0.0), (_SQ, _SQ), (0.0, 1.0), (-_SQ, _SQ),
    (-1.0, 0.0), (-_SQ, -_SQ), (0.0, -1.0), (_SQ, -_SQ),
)

MAZE_STYLES = ("u_maze", "rooms", "corridor")


@dataclass(frozen=True)
class MazeLayout:
    """Static maze description; procedural generation is byte-identical per seed."""

    width: int
    height: int
    walls: frozenset
    start: Cell
    goal: frozenset
    seed: int
    style: str

    def __post_init__(self):
        if self.start in self.walls:
            raise ConfigError(f"start {self.start} lies inside a wall")
        if self.walls & self.goal:
            raise ConfigError("goal cells overlap walls")

    def in_bounds(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def open_cells(self) -> list[Cell]:
        return [
            (x, y)
            for x in range(self.width)
            for y in range(self.height)
            if (x, y) not in self.walls
        ]

    def to_json(self) -> str:
        doc = {
            "version": LAYOUT_VERSION,
            "width": self.width,
            "height": self.height,
            "walls": sorted(list(c) for c in self.walls),
            "start": list(self.start),
            "goal": sorted(list(c) for c in self.goal),
            "seed": self.seed,
            "style": self.style,
        }
        return json.dumps(doc)

    @staticmethod
    def from_json(text: str) -> "MazeLayout":
        doc = json.loads(text)
        if doc.get("version") != LAYOUT_VERSION:
            from .errors import VersionError

            raise VersionError(f"layout version {doc.get('version')!r}, expected {LAYOUT_VERSION}")
        return MazeLayout(
            width=doc["width"],
            height=doc["height"],
            walls=frozenset(tuple(c) for c in doc["walls"]),
            start=tuple(doc["start"]),
            goal=frozenset(tuple(c) for c in doc["goal"]),
            seed=doc["seed"],
            style=doc["style"],
        )


def _connected_from(layout_walls: set, width: int, height: int, start: Cell) -> set:
    """Cells reachable from start under 4-connected moves around walls."""
    seen = {start}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for dx, dy in GRID_ACTIONS:
            nxt = (x + dx, y + dy)
            if 0 <= nxt[0] < width and 0 <= nxt[1] < height and nxt not in layout_walls and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def _u_maze_walls(width: int, height: int) -> set:
    # Two offset bars force every path into a serpentine detour, so the
    # start->goal distance strictly exceeds the Manhattan distance.
    r_low = height // 3
    r_high = (2 * height) // 3
    if r_high <= r_low:
        r_high = r_low + 2
    walls = set()
    for x in range(0, width - 1):
        walls.add((x, r_low))
    for x in range(1, width):
        walls.add((x, r_high))
    return walls


def _rooms_walls(width: int, height: int, rng: np.random.Generator) -> set:
    cx = int(rng.integers(2, width - 2))
    cy = int(rng.integers(2, height - 2))
    walls = {(cx, y) for y in range(height)} | {(x, cy) for x in range(width)}
    doors = [
        (cx, int(rng.integers(0, cy))),
        (cx, int(rng.integers(cy + 1, height))),
        (int(rng.integers(0, cx)), cy),
        (int(rng.integers(cx + 1, width)), cy),
    ]
    walls -= set(doors)
    # Sprinkle obstacles that keep the maze fully connected.
    start = (0, 0)
    goal = (width - 1, height - 1)
    n_open = width * height - len(walls)
    for _ in range(max(1, (width * height) // 12)):
        cand = (int(rng.integers(0, width)), int(rng.integers(0, height)))
        if cand in walls or cand in (start, goal):
            continue
        trial = walls | {cand}
        if len(_connected_from(trial, width, height, start)) == n_open - 1:
            walls = trial
            n_open -= 1
    return walls


def _corridor_walls(width: int, height: int, rng: np.random.Generator) -> set:
    # Recursive backtracker over the even-coordinate lattice; uncarved cells
    # stay walls, so every open cell is connected by construction.
    nodes_x = range(0, width, 2)
    nodes_y = range(0, height, 2)
    carved = set()
    stack = [(0, 0)]
    visited = {(0, 0)}
    carved.add((0, 0))
    while stack:
        x, y = stack[-1]
        neighbors = []
        for dx, dy in ((2, 0), (0, 2), (-2, 0), (0, -2)):
            nxt = (x + dx, y + dy)
            if nxt[0] in nodes_x and nxt[1] in nodes_y and nxt not in visited:
                neighbors.append(nxt)
        if not neighbors:
            stack.pop()
            continue
        nxt = neighbors[int(rng.integers(0, len(neighbors)))]
        carved.add(nxt)
        carved.add(((x + nxt[0]) // 2, (y + nxt[1]) // 2))
        visited.add(nxt)
        stack.append(nxt)
    return {
        (x, y)
        for x in range(width)
        for y in range(height)
        if (x, y) not in carved
    }


def generate_maze(seed: int, width: int, height: int, style: str = "u_maze") -> MazeLayout:
    """Build a connected maze layout. Same arguments always give the same layout."""
    if width < 5 or height < 5:
        raise ConfigError(f"maze dimensions must be >= 5, got {width}x{height}")
    if style not in MAZE_STYLES:
        raise ConfigError(f"unknown maze style {style!r}, expected one of {MAZE_STYLES}")
    rng = np.random.default_rng(seed)
    start = (0, 0)
    if style == "u_maze":
        walls = _u_maze_walls(width, height)
        goal = (width - 1, height - 1)
    elif style == "rooms":
        walls = _rooms_walls(width, height, rng)
        goal = (width - 1, height - 1)
    else:
        walls = _corridor_walls(width, height, rng)
        goal = (2 * ((width - 1) // 2), 2 * ((height - 1) // 2))
    reachable = _connected_from(walls, width, height, start)
    n_open = width * height - len(walls)
    assert len(reachable) == n_open, "generated maze is not connected"
    assert goal in reachable
    return MazeLayout(
        width=width,
        height=height,
        walls=frozenset(walls),
        start=start,
        goal=frozenset([goal]),
        seed=seed,
        style=style,
    )


class GridMaze:
    """Deterministic 4-connected grid maze with sparse goal reward."""

    kind = "grid"
    feature_dim = 2

    def __init__(self, layout: MazeLayout, horizon: int = 100, gamma: float = 0.98):
        if not 0.0 < gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0,1), got {gamma}")
        self.layout = layout
        self.horizon = horizon
        self.gamma = gamma
        self.n_actions = len(GRID_ACTIONS)
        self._fx = 1.0 / max(layout.width - 1, 1)
        self._fy = 1.0 / max(layout.height - 1, 1)
        self._state: Cell = layout.start
        self._steps = 0
        self._done = False

    def clone(self) -> "GridMaze":
        return GridMaze(self.layout, horizon=self.horizon, gamma=self.gamma)

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "width": self.layout.width,
            "height": self.layout.height,
            "style": self.layout.style,
            "seed": self.layout.seed,
            "horizon": self.horizon,
            "gamma": self.gamma,
        }

    def reset(self) -> Cell:
        self._state = self.layout.start
        self._steps = 0
        self._done = False
        return self._state

    def step(self, action: int) -> tuple[Cell, float, bool]:
        if self._done:
            raise UsageError("step() called on a finished episode; call reset() first")
        if not 0 <= action < self.n_actions:
            raise UsageError(f"action {action} outside 0..{self.n_actions - 1}")
        x, y = self._state
        dx, dy = GRID_ACTIONS[action]
        nxt = (x + dx, y + dy)
        if not self.layout.in_bounds(nxt) or nxt in self.layout.walls:
            nxt = self._state
        self._steps += 1
        reward = 1.0 if nxt in self.layout.goal else 0.0
        done = reward > 0.0 or self._steps >= self.horizon
        self._state = nxt
        self._done = done
        return nxt, reward, done

    def is_goal(self, state: Cell) -> bool:
        return state in self.layout.goal

    def state_features(self, state: Cell) -> np.ndarray:
        return np.array([state[0] * self._fx, state[1] * self._fy], dtype=np.float32)

    def features_to_cell(self, features) -> Cell:
        f = np.asarray(features, dtype=np.float64)
        return (int(round(f[0] / self._fx)), int(round(f[1] / self._fy)))

    def features_in_goal(self, features: np.ndarray) -> np.ndarray:
        """Vectorized goal test over an (N, 2) feature array."""
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        xs = np.rint(f[:, 0] / self._fx).astype(np.int64)
        ys = np.rint(f[:, 1] / self._fy).astype(np.int64)
        hits = np.zeros(len(f), dtype=bool)
        for gx, gy in self.layout.goal:
            hits |= (xs == gx) & (ys == gy)
        return hits

    def goal_features(self) -> np.ndarray:
        gx, gy = min(self.layout.goal)
        return self.state_features((gx, gy))

    def open_cells(self) -> list[Cell]:
        return self.layout.open_cells()


class PointMass:
    """Continuous point in the unit box with 8 compass moves of fixed length.

    Walls, when a layout is supplied, are the layout's cells scaled into the
    unit box; a move whose endpoint lands inside a wall or out of bounds
    leaves the state unchanged.
    """

    kind = "point_mass"
    feature_dim = 2

    def __init__(
        self,
        start: tuple[float, float] = (0.5, 0.5),
        goal_center: tuple[float, float] = (0.9, 0.9),
        goal_radius: float = 0.1,
        layout: MazeLayout | None = None,
        horizon: int = 200,
        step_size: float = 0.05,
        gamma: float = 0.98,
    ):
        if not 0.0 < gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0,1), got {gamma}")
        if goal_radius <= 0.0:
            raise ConfigError("goal_radius must be positive")
        self.start = (float(start[0]), float(start[1]))
        self.goal_center = (float(goal_center[0]), float(goal_center[1]))
        self.goal_radius = float(goal_radius)
        self.layout = layout
        self.horizon = horizon
        self.step_size = float(step_size)
        self.gamma = gamma
        self.n_actions = len(COMPASS_ACTIONS)
        self._state = self.start
        self._steps = 0
        self._done = False
        if layout is not None and self._blocked(self.start):
            raise ConfigError("start position lies inside a wall cell")

    @staticmethod
    def from_layout(layout: MazeLayout, horizon: int = 200, step_size: float = 0.05,
                    gamma: float = 0.98, goal_radius: float = 0.1) -> "PointMass":
        def center(cell: Cell) -> tuple[float, float]:
            return ((cell[0] + 0.5) / layout.width, (cell[1] + 0.5) / layout.height)

        goal_cell = min(layout.goal)
        return PointMass(
            start=center(layout.start),
            goal_center=center(goal_cell),
            goal_radius=goal_radius,
            layout=layout,
            horizon=horizon,
            step_size=step_size,
            gamma=gamma,
        )

    def clone(self) -> "PointMass":
        return PointMass(
            start=self.start,
            goal_center=self.goal_center,
            goal_radius=self.goal_radius,
            layout=self.layout,
            horizon=self.horizon,
            step_size=self.step_size,
            gamma=self.gamma,
        )

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "start": list(self.start),
            "goal_center": list(self.goal_center),
            "goal_radius": self.goal_radius,
            "horizon": self.horizon,
            "step_size": self.step_size,
            "gamma": self.gamma,
            "layout_seed": None if self.layout is None else self.layout.seed,
            "layout_style": None if self.layout is None else self.layout.style,
            "layout_width": None if self.layout is None else self.layout.width,
            "layout_height": None if self.layout is None else self.layout.height,
        }

    def _cell_of(self, pos: tuple[float, float]) -> Cell:
        assert self.layout is not None
        x = min(int(pos[0] * self.layout.width), self.layout.width - 1)
        y = min(int(pos[1] * self.layout.height), self.layout.height - 1)
        return (x, y)

    def _blocked(self, pos: tuple[float, float]) -> bool:
        if not (0.0 <= pos[0] <= 1.0 and 0.0 <= pos[1] <= 1.0):
            return True
        if self.layout is None:
            return False
        return self._cell_of(pos) in self.layout.walls

    def reset(self) -> tuple[float, float]:
        self._state = self.start
        self._steps = 0
        self._done = False
        return self._state

    def is_goal(self, state: tuple[float, float]) -> bool:
        return math.dist(state, self.goal_center) < self.goal_radius

    def step(self, action: int) -> tuple[tuple[float, float], float, bool]:
        if self._done:
            raise UsageError("step() called on a finished episode; call reset() first")
        if not 0 <= action < self.n_actions:
            raise UsageError(f"action {action} outside 0..{self.n_actions - 1}")
        hx, hy = COMPASS_ACTIONS[action]
        cand = (self._state[0] + hx * self.step_size, self._state[1] + hy * self.step_size)
        nxt = self._state if self._blocked(cand) else cand
        self._steps += 1
        reward = 1.0 if self.is_goal(nxt) else 0.0
        done = reward > 0.0 or self._steps >= self.horizon
        self._state = nxt
        self._done = done
        return nxt, reward, done

    def state_features(self, state: tuple[float, float]) -> np.ndarray:
        return np.array([state[0], state[1]], dtype=np.float32)

    def features_in_goal(self, features: np.ndarray) -> np.ndarray:
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        d = np.hypot(f[:, 0] - self.goal_center[0], f[:, 1] - self.goal_center[1])
        return d < self.goal_radius

    def goal_features(self) -> np.ndarray:
        return np.array(self.goal_center, dtype=np.float32)
