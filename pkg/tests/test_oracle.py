import numpy as np
import pytest

from intentrl import envs, oracle


def open_grid(width, height):
    return envs.MazeLayout(width=width, height=height, walls=frozenset(),
                           start=(0, 0), goal=frozenset([(width - 1, height - 1)]),
                           seed=0, style="u_maze")


def test_goal_distance_is_zero(small_layout):
    dist = oracle.bfs_distances(small_layout, small_layout.goal)
    for g in small_layout.goal:
        assert dist[g] == 0


def test_open_grid_is_manhattan():
    layout = open_grid(3, 3)
    dist = oracle.bfs_distances(layout, (2, 2))
    assert dist[(0, 0)] == 4
    for (x, y), d in dist.items():
        assert d == abs(x - 2) + abs(y - 2)


def test_u_maze_forces_detour(u_maze_layout):
    dist = oracle.bfs_distances(u_maze_layout, u_maze_layout.goal)
    manhattan = (u_maze_layout.width - 1) + (u_maze_layout.height - 1)
    assert dist[u_maze_layout.start] > manhattan


def test_optimal_value_examples():
    assert oracle.optimal_value(0, 0.98) == 0.0
    assert oracle.optimal_value(1, 0.98) == pytest.approx(-1.0)
    # Cross-check the closed form by summing the shifted-reward series.
    series = sum(0.98**t * (-1.0) for t in range(5))
    assert oracle.optimal_value(5, 0.98) == pytest.approx(-4.80396, abs=1e-5)
    assert oracle.optimal_value(5, 0.98) == pytest.approx(series, abs=1e-12)


def test_value_monotone_in_distance():
    values = [oracle.optimal_value(d, 0.98) for d in range(30)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_values_bounded():
    bound = oracle.unreachable_value(0.98)
    for d in range(0, 500, 7):
        v = oracle.optimal_value(d, 0.98)
        assert bound <= v <= 0.0
    table = oracle.oracle_table(open_grid(5, 5), gamma=0.98)
    for key in table.distances:
        assert bound <= table.value(*key) <= 0.0


def test_table_symmetry_on_reversible_maze(small_layout):
    table = oracle.oracle_table(small_layout, gamma=0.98)
    cells = small_layout.open_cells()
    for a in cells[::3]:
        for b in cells[::3]:
            assert table.value(a, b) == pytest.approx(table.value(b, a))


def test_triangle_inequality_exhaustive():
    layout = envs.generate_maze(0, 5, 5, "u_maze")
    table = oracle.oracle_table(layout, gamma=0.98)
    cells = layout.open_cells()
    for s in cells:
        for m in cells:
            for g in cells:
                d_sg = table.distance(s, g)
                d_sm = table.distance(s, m)
                d_mg = table.distance(m, g)
                if None not in (d_sg, d_sm, d_mg):
                    assert d_sg <= d_sm + d_mg


def test_unreachable_sentinel():
    # A wall row makes the far side unreachable.
    width = height = 5
    walls = frozenset((x, 2) for x in range(width))
    layout = envs.MazeLayout(width=width, height=height, walls=walls, start=(0, 0),
                             goal=frozenset([(4, 4)]), seed=0, style="u_maze")
    table = oracle.oracle_table(layout, gamma=0.98, goals=[(4, 4)])
    assert table.distance((0, 0), (4, 4)) is None
    assert table.value((0, 0), (4, 4)) == oracle.unreachable_value(0.98)


def test_closed_form_matches_value_iteration(small_layout):
    goal = min(small_layout.goal)
    vi = oracle.value_iteration(small_layout, goal, gamma=0.98, tol=1e-13)
    dist = oracle.bfs_distances(small_layout, goal)
    for cell, d in dist.items():
        assert vi[cell] == pytest.approx(oracle.optimal_value(d, 0.98), abs=1e-10)


def test_optimal_action_descends(small_layout):
    env = envs.GridMaze(small_layout)
    dist = oracle.bfs_distances(small_layout, small_layout.goal)
    for cell, d in dist.items():
        if d == 0:
            assert oracle.optimal_action(small_layout, dist, cell) is None
            continue
        a = oracle.optimal_action(small_layout, dist, cell)
        dx, dy = envs.GRID_ACTIONS[a]
        assert dist[(cell[0] + dx, cell[1] + dy)] == d - 1


def test_l2_distances_ignore_walls(u_maze_layout):
    goal = min(u_maze_layout.goal)
    l2 = oracle.l2_distances(u_maze_layout, goal)
    dist = oracle.bfs_distances(u_maze_layout, goal)
    assert l2[goal] == 0.0
    start = u_maze_layout.start
    assert l2[start] < dist[start]  # Euclidean shortcut through walls


def test_export_csv(tmp_path, small_layout):
    table = oracle.oracle_table(small_layout, gamma=0.98, goals=[min(small_layout.goal)])
    out = tmp_path / "oracle.csv"
    table.to_csv(out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "state_x,state_y,goal_x,goal_y,distance,value"
    assert len(lines) == 1 + len(table.distances)
