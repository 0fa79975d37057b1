"""Exact goal-conditioned optimal values on grid mazes.

Shortest-path distances come from BFS under the true dynamics (walls block,
bumps self-loop), so they are dynamics-aware, unlike a Euclidean proxy. The
closed-form value of being d steps from an absorbing goal, with the shifted
sparse reward convention (0 on the goal, -1 elsewhere), is -(1 - gamma^d) /
(1 - gamma).
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass

from .envs import GRID_ACTIONS, Cell, GridMaze, MazeLayout


def _layout_of(env_or_layout) -> MazeLayout:
    if isinstance(env_or_layout, MazeLayout):
        return env_or_layout
    return env_or_layout.layout


def bfs_distances(env_or_layout, goal) -> dict:
    """Exact step counts from every reachable cell to the nearest goal cell.

    Unreachable cells are simply absent from the returned map.
    """
    layout = _layout_of(env_or_layout)
    if isinstance(goal, tuple) and len(goal) == 2 and isinstance(goal[0], int):
        sources = [goal]
    else:
        sources = sorted(goal)
    dist: dict[Cell, int] = {}
    queue = deque()
    for g in sources:
        if g not in layout.walls and layout.in_bounds(g):
            dist[g] = 0
            queue.append(g)
    while queue:
        x, y = queue.popleft()
        d = dist[(x, y)]
        for dx, dy in GRID_ACTIONS:
            nxt = (x + dx, y + dy)
            if layout.in_bounds(nxt) and nxt not in layout.walls and nxt not in dist:
                dist[nxt] = d + 1
                queue.append(nxt)
    return dist


def optimal_value(d: int, gamma: float) -> float:
    """Discounted return for reaching an absorbing goal exactly d steps away."""
    return -(1.0 - gamma**d) / (1.0 - gamma) + 0.0  # normalizes -0.0 at d = 0


def unreachable_value(gamma: float) -> float:
    """Sentinel for unreachable pairs: the limit of optimal_value as d grows."""
    return -1.0 / (1.0 - gamma)


def l2_distances(layout: MazeLayout, goal: Cell) -> dict:
    """Euclidean cell distances to the goal, ignoring walls (figure parity only)."""
    return {
        c: math.dist(c, goal)
        for c in layout.open_cells()
    }


@dataclass
class OracleTable:
    """All-pairs exact distances and values for an enumerable maze."""

    gamma: float
    distances: dict  # (state, goal) -> steps, reachable pairs only

    def distance(self, s: Cell, g: Cell):
        return self.distances.get((s, g))

    def value(self, s: Cell, g: Cell) -> float:
        d = self.distances.get((s, g))
        if d is None:
            return unreachable_value(self.gamma)
        return optimal_value(d, self.gamma)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["state_x", "state_y", "goal_x", "goal_y", "distance", "value"])
            for (s, g) in sorted(self.distances):
                writer.writerow([s[0], s[1], g[0], g[1], self.distances[(s, g)],
                                 repr(optimal_value(self.distances[(s, g)], self.gamma))])


def oracle_table(env_or_layout, gamma: float | None = None, goals=None) -> OracleTable:
    """BFS from every goal of interest (default: all open cells)."""
    layout = _layout_of(env_or_layout)
    if gamma is None:
        gamma = getattr(env_or_layout, "gamma", 0.98)
    if goals is None:
        goals = layout.open_cells()
    distances = {}
    for g in goals:
        for s, d in bfs_distances(layout, g).items():
            distances[(s, g)] = d
    return OracleTable(gamma=gamma, distances=distances)


def optimal_action(layout: MazeLayout, dist_to_goal: dict, state: Cell) -> int | None:
    """Lowest-index action strictly decreasing the BFS distance, None at/off goal."""
    d = dist_to_goal.get(state)
    if d is None or d == 0:
        return None
    x, y = state
    for a, (dx, dy) in enumerate(GRID_ACTIONS):
        nxt = (x + dx, y + dy)
        if dist_to_goal.get(nxt) == d - 1:
            return a
    return None


def value_iteration(layout: MazeLayout, goal, gamma: float, tol: float = 1e-12,
                    max_iters: int = 100000) -> dict:
    """Independent fixed-point check of the closed form.

    Solves V(s) = 0 on the goal, else -1 + gamma * max over successors, by
    plain synchronous iteration in double precision.
    """
    goal_set = {goal} if isinstance(goal, tuple) and isinstance(goal[0], int) else set(goal)
    cells = layout.open_cells()
    succ = {}
    for c in cells:
        nxts = []
        for dx, dy in GRID_ACTIONS:
            n = (c[0] + dx, c[1] + dy)
            if not layout.in_bounds(n) or n in layout.walls:
                n = c
            nxts.append(n)
        succ[c] = nxts
    v = {c: 0.0 for c in cells}
    for _ in range(max_iters):
        delta = 0.0
        new_v = {}
        for c in cells:
            if c in goal_set:
                new_v[c] = 0.0
            else:
                new_v[c] = -1.0 + gamma * max(v[n] for n in succ[c])
            delta = max(delta, abs(new_v[c] - v[c]))
        v = new_v
        if delta < tol:
            break
    return v


def q_iteration(env: GridMaze, reward_fn, gamma: float, tol: float = 1e-12,
                max_iters: int = 100000) -> dict:
    """Exact Q values for the deterministic grid MDP under an arbitrary reward.

    reward_fn(s, a, s_next, done) -> float. Goal states are absorbing: their
    Q values are 0 and transitions into them do not bootstrap.
    """
    layout = env.layout
    cells = layout.open_cells()
    trans = {}
    for c in cells:
        for a, (dx, dy) in enumerate(GRID_ACTIONS):
            n = (c[0] + dx, c[1] + dy)
            if not layout.in_bounds(n) or n in layout.walls:
                n = c
            trans[(c, a)] = (n, n in layout.goal)
    q = {(c, a): 0.0 for c in cells for a in range(len(GRID_ACTIONS))}
    for _ in range(max_iters):
        delta = 0.0
        new_q = {}
        for (c, a), (n, done) in trans.items():
            if c in layout.goal:
                new_q[(c, a)] = 0.0
                continue
            r = reward_fn(c, a, n, done)
            boot = 0.0 if done else max(q[(n, b)] for b in range(len(GRID_ACTIONS)))
            new_q[(c, a)] = r + gamma * boot
            delta = max(delta, abs(new_q[(c, a)] - q[(c, a)]))
        q = new_q
        if delta < tol:
            break
    return q
