import numpy as np
import pytest

from intentrl import data, envs


@pytest.fixture(scope="session")
def u_maze_layout():
    return envs.generate_maze(0, 11, 11, "u_maze")


@pytest.fixture()
def u_maze_env(u_maze_layout):
    return envs.GridMaze(u_maze_layout, horizon=100, gamma=0.98)


@pytest.fixture(scope="session")
def small_layout():
    return envs.generate_maze(0, 7, 7, "u_maze")


@pytest.fixture()
def small_env(small_layout):
    return envs.GridMaze(small_layout, horizon=60, gamma=0.98)


@pytest.fixture(scope="session")
def point_mass_env():
    return envs.PointMass(start=(0.5, 0.5), goal_center=(0.9, 0.9), horizon=200)


@pytest.fixture(scope="session")
def random_walk_dataset():
    env = envs.GridMaze(envs.generate_maze(0, 7, 7, "u_maze"), horizon=60, gamma=0.98)
    return data.collect_random(env, 40, seed=3)
