"""Trajectory datasets: collection, corruption, filtering, sampling, persistence.

Trajectories store feature vectors, optionally with the actions that produced
them; the value-function sampler never needs the actions. Files are JSON
lines: a header record, then one trajectory per line.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import oracle
from .envs import GridMaze, PointMass
from .errors import (
    CollectionError,
    ConfigError,
    DatasetParseError,
    SamplingError,
    VersionError,
)

DATASET_VERSION = 1


@dataclass
class Trajectory:
    states: np.ndarray  # (T, D) float32
    actions: np.ndarray | None  # (T - 1,) int64, None for action-free data
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float32)
        if len(self.states) < 2:
            raise ConfigError("a trajectory needs at least two states")
        if self.actions is not None:
            self.actions = np.asarray(self.actions, dtype=np.int64)
            if len(self.actions) != len(self.states) - 1:
                raise ConfigError("actions must have length len(states) - 1")

    def __len__(self) -> int:
        return len(self.states)


class TrajectoryDataset:
    """Immutable bag of trajectories with flat arrays for uniform frame sampling."""

    def __init__(self, trajectories: list, env_tag: dict | None = None):
        self.trajectories = list(trajectories)
        self.env_tag = env_tag or {}
        self._flat = None

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_frames(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @property
    def feature_dim(self) -> int:
        if not self.trajectories:
            raise SamplingError("empty dataset has no feature dim")
        return self.trajectories[0].states.shape[1]

    @property
    def has_actions(self) -> bool:
        return bool(self.trajectories) and all(t.actions is not None for t in self.trajectories)

    @property
    def index(self) -> list:
        """(traj_id, step) for every frame that has a successor."""
        return [
            (tid, step)
            for tid, traj in enumerate(self.trajectories)
            for step in range(len(traj) - 1)
        ]

    def _arrays(self):
        """Cached flat views: states, traj id / position per frame, pair starts."""
        if self._flat is None:
            if not self.trajectories:
                raise SamplingError("cannot sample from an empty dataset")
            states = np.concatenate([t.states for t in self.trajectories], axis=0)
            lengths = np.array([len(t) for t in self.trajectories])
            traj_of = np.repeat(np.arange(len(lengths)), lengths)
            pos = np.concatenate([np.arange(n) for n in lengths])
            remaining = np.concatenate([n - 1 - np.arange(n) for n in lengths])
            pair_starts = np.flatnonzero(remaining > 0)
            self._flat = (states, traj_of, pos, remaining, pair_starts)
        return self._flat

    def all_states(self) -> np.ndarray:
        return self._arrays()[0]


@dataclass
class SamplerConfig:
    """Goal/outcome sampling probabilities for value-function training tuples."""

    p_randomgoal: float = 0.1
    p_trajgoal: float = 0.8
    p_currgoal: float = 0.1
    p_samegoal: float = 0.5
    intent_sametraj: bool = True
    p_future: float = 0.02  # geometric future-offset parameter, 1 - gamma by default

    def __post_init__(self):
        total = self.p_randomgoal + self.p_trajgoal + self.p_currgoal
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"goal branch probabilities sum to {total}, expected 1")
        for name in ("p_randomgoal", "p_trajgoal", "p_currgoal", "p_samegoal"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if not 0.0 < self.p_future <= 1.0:
            raise ConfigError(f"p_future={self.p_future} outside (0, 1]")


@dataclass
class IcvfSample:
    s: np.ndarray
    s_next: np.ndarray
    s_plus: np.ndarray
    g: np.ndarray
    s_eq_splus: bool
    s_eq_g: bool


@dataclass
class IcvfBatch:
    """Column-oriented sample batch; goal_branch (0=random, 1=traj, 2=curr) and samegoal_override are diagnostics."""

    s: np.ndarray
    s_next: np.ndarray
    s_plus: np.ndarray
    g: np.ndarray
    s_eq_splus: np.ndarray
    s_eq_g: np.ndarray
    goal_branch: np.ndarray
    samegoal_override: np.ndarray

    def __len__(self) -> int:
        return len(self.s)

    @staticmethod
    def single(s, s_next, s_plus, g, s_eq_splus: bool, s_eq_g: bool) -> "IcvfBatch":
        one = lambda v: np.atleast_2d(np.asarray(v, dtype=np.float32))
        return IcvfBatch(
            s=one(s), s_next=one(s_next), s_plus=one(s_plus), g=one(g),
            s_eq_splus=np.array([s_eq_splus]), s_eq_g=np.array([s_eq_g]),
            goal_branch=np.zeros(1, dtype=np.int8),
            samegoal_override=np.zeros(1, dtype=bool),
        )

    @staticmethod
    def from_samples(samples: list) -> "IcvfBatch":
        return IcvfBatch(
            s=np.stack([x.s for x in samples]),
            s_next=np.stack([x.s_next for x in samples]),
            s_plus=np.stack([x.s_plus for x in samples]),
            g=np.stack([x.g for x in samples]),
            s_eq_splus=np.array([x.s_eq_splus for x in samples]),
            s_eq_g=np.array([x.s_eq_g for x in samples]),
            goal_branch=np.zeros(len(samples), dtype=np.int8),
            samegoal_override=np.zeros(len(samples), dtype=bool),
        )

    def to_samples(self) -> list:
        return [
            IcvfSample(
                s=self.s[i], s_next=self.s_next[i], s_plus=self.s_plus[i], g=self.g[i],
                s_eq_splus=bool(self.s_eq_splus[i]), s_eq_g=bool(self.s_eq_g[i]),
            )
            for i in range(len(self))
        ]


def _truncated_geometric(rng: np.random.Generator, p: float, limit: np.ndarray) -> np.ndarray:
    """Geometric offsets on {1, 2, ...} clipped to the per-row limit (>= 1)."""
    draws = rng.geometric(p, size=limit.shape)
    return np.minimum(draws, limit)


def sample_icvf_arrays(dataset: TrajectoryDataset, config: SamplerConfig,
                       batch_size: int, rng: np.random.Generator) -> IcvfBatch:
    """Vectorized tuple sampler.

    Per row: (s, s') a uniform adjacent pair; the goal comes from the
    current state, the same trajectory's future (truncated geometric
    offset), or a uniform random frame; the outcome comes from the same
    trajectory's future (or the goal rule when intent_sametraj is off) and
    is overridden to equal the goal with probability p_samegoal.
    """
    states, traj_of, pos, remaining, pair_starts = dataset._arrays()
    if len(pair_starts) == 0:
        raise SamplingError("dataset has no adjacent state pairs")
    n = len(states)
    i = pair_starts[rng.integers(0, len(pair_starts), size=batch_size)]
    rem = remaining[i]

    branch = rng.choice(
        np.array([0, 1, 2], dtype=np.int8), size=batch_size,
        p=[config.p_randomgoal, config.p_trajgoal, config.p_currgoal],
    )
    g_idx = np.empty(batch_size, dtype=np.int64)
    g_idx[branch == 0] = rng.integers(0, n, size=int((branch == 0).sum()))
    traj_mask = branch == 1
    g_idx[traj_mask] = i[traj_mask] + _truncated_geometric(rng, config.p_future, rem[traj_mask])
    g_idx[branch == 2] = i[branch == 2]

    if config.intent_sametraj:
        sp_idx = i + _truncated_geometric(rng, config.p_future, rem)
    else:
        sp_branch = rng.choice(
            np.array([0, 1, 2], dtype=np.int8), size=batch_size,
            p=[config.p_randomgoal, config.p_trajgoal, config.p_currgoal],
        )
        sp_idx = np.empty(batch_size, dtype=np.int64)
        sp_idx[sp_branch == 0] = rng.integers(0, n, size=int((sp_branch == 0).sum()))
        m = sp_branch == 1
        sp_idx[m] = i[m] + _truncated_geometric(rng, config.p_future, rem[m])
        sp_idx[sp_branch == 2] = i[sp_branch == 2]

    same = rng.random(batch_size) < config.p_samegoal
    sp_idx = np.where(same, g_idx, sp_idx)

    s = states[i]
    batch = IcvfBatch(
        s=s,
        s_next=states[i + 1],
        s_plus=states[sp_idx],
        g=states[g_idx],
        s_eq_splus=np.all(s == states[sp_idx], axis=1),
        s_eq_g=np.all(s == states[g_idx], axis=1),
        goal_branch=branch,
        samegoal_override=same,
    )
    return batch


def sample_icvf_batch(dataset: TrajectoryDataset, config: SamplerConfig,
                      batch_size: int, rng: np.random.Generator) -> list:
    """Sample a batch as a list of IcvfSample records."""
    return sample_icvf_arrays(dataset, config, batch_size, rng).to_samples()


def _rollout(env, act_fn, rng) -> Trajectory:
    state = env.reset()
    feats = [env.state_features(state)]
    actions = []
    done = False
    while not done:
        a = act_fn(state, rng)
        state, _, done = env.step(a)
        feats.append(env.state_features(state))
        actions.append(a)
    return Trajectory(states=np.stack(feats), actions=np.array(actions), meta={})


def collect_random(env, n_trajectories: int, seed: int) -> TrajectoryDataset:
    """Uniform-random-action rollouts to episode end; deterministic per seed."""
    if n_trajectories < 1:
        raise ConfigError("n_trajectories must be >= 1")
    rng = np.random.default_rng(seed)
    trajs = []
    for k in range(n_trajectories):
        traj = _rollout(env, lambda s, r: int(r.integers(env.n_actions)), rng)
        traj.meta = {"source": "random", "seed": seed, "episode": k}
        trajs.append(traj)
    return TrajectoryDataset(trajs, env_tag=env.describe())


def _grid_expert_action(env: GridMaze, dist: dict, state) -> int:
    a = oracle.optimal_action(env.layout, dist, state)
    return 0 if a is None else a


def _point_mass_expert_action(env: PointMass, dist: dict, state) -> int:
    cell = env._cell_of(state)
    d = dist.get(cell)
    if d is None or d == 0:
        target = env.goal_center
    else:
        from .envs import GRID_ACTIONS

        target = None
        for dx, dy in GRID_ACTIONS:
            nxt = (cell[0] + dx, cell[1] + dy)
            if dist.get(nxt) == d - 1:
                target = ((nxt[0] + 0.5) / env.layout.width, (nxt[1] + 0.5) / env.layout.height)
                break
        if target is None:
            target = env.goal_center
    from .envs import COMPASS_ACTIONS

    best, best_d = 0, float("inf")
    for a, (hx, hy) in enumerate(COMPASS_ACTIONS):
        cand = (state[0] + hx * env.step_size, state[1] + hy * env.step_size)
        dd = (cand[0] - target[0]) ** 2 + (cand[1] - target[1]) ** 2
        if dd < best_d:
            best, best_d = a, dd
    return best


def collect_random_starts(env, n_trajectories: int, seed: int) -> TrajectoryDataset:
    """Random-action rollouts started from uniformly drawn open cells.

    The grid analog of diverse prior data: episodes still terminate on goal
    entry, but coverage spans the whole maze instead of hugging the start.
    """
    if not isinstance(env, GridMaze):
        raise ConfigError("collect_random_starts needs a grid environment")
    if n_trajectories < 1:
        raise ConfigError("n_trajectories must be >= 1")
    rng = np.random.default_rng(seed)
    starts = sorted(set(env.layout.open_cells()) - set(env.layout.goal))
    trajs = []
    for k in range(n_trajectories):
        start = starts[int(rng.integers(len(starts)))]
        sub = GridMaze(dataclasses.replace(env.layout, start=start),
                       horizon=env.horizon, gamma=env.gamma)
        traj = _rollout(sub, lambda s, r: int(r.integers(sub.n_actions)), rng)
        traj.meta = {"source": "random", "seed": seed, "episode": k, "start": list(start)}
        trajs.append(traj)
    return TrajectoryDataset(trajs, env_tag=env.describe())


def collect_passive_sweep(env, per_cell: int, seed: int, horizon: int | None = None) -> TrajectoryDataset:
    """Goal-free random walks started once per open cell, repeated per_cell times.

    The video analog: purely passive data with no terminations, exhaustively
    covering the maze (including walks out of the task's goal cells).
    """
    if not isinstance(env, GridMaze):
        raise ConfigError("collect_passive_sweep needs a grid environment")
    if per_cell < 1:
        raise ConfigError("per_cell must be >= 1")
    goalless = dataclasses.replace(env.layout, goal=frozenset())
    h = env.horizon if horizon is None else horizon
    trajs = []
    for k, cell in enumerate(sorted(env.layout.open_cells())):
        sub = GridMaze(dataclasses.replace(goalless, start=cell), horizon=h, gamma=env.gamma)
        part = collect_random(sub, per_cell, seed=seed * 100_003 + k)
        for t in part.trajectories:
            t.meta["start"] = list(cell)
        trajs.extend(part.trajectories)
    return TrajectoryDataset(trajs, env_tag=env.describe())


def collect_noisy_expert(env, sigma: float, n_trajectories: int, seed: int) -> TrajectoryDataset:
    """Shortest-path expert corrupted with probability sigma per step."""
    if not 0.0 <= sigma <= 1.0:
        raise ConfigError(f"sigma={sigma} outside [0, 1]")
    if n_trajectories < 1:
        raise ConfigError("n_trajectories must be >= 1")
    if isinstance(env, GridMaze):
        dist = oracle.bfs_distances(env, env.layout.goal)
        if env.layout.start not in dist:
            raise CollectionError("goal unreachable from start; no expert exists")
        expert = lambda s: _grid_expert_action(env, dist, s)
    elif isinstance(env, PointMass) and env.layout is not None:
        goal_cell = env._cell_of(env.goal_center)
        dist = oracle.bfs_distances(env.layout, goal_cell)
        if env._cell_of(env.start) not in dist:
            raise CollectionError("goal unreachable from start; no expert exists")
        expert = lambda s: _point_mass_expert_action(env, dist, s)
    else:
        raise CollectionError("no shortest-path expert for this environment")
    rng = np.random.default_rng(seed)

    def act(state, r):
        if r.random() < sigma:
            return int(r.integers(env.n_actions))
        return expert(state)

    trajs = []
    for k in range(n_trajectories):
        traj = _rollout(env, act, rng)
        traj.meta = {"source": "noisy_expert", "sigma": sigma, "seed": seed, "episode": k}
        trajs.append(traj)
    return TrajectoryDataset(trajs, env_tag=env.describe())


def filter_successes(dataset: TrajectoryDataset, env) -> TrajectoryDataset:
    """Keep only trajectories whose states never enter the goal region."""
    kept = [
        t for t in dataset.trajectories
        if not env.features_in_goal(t.states).any()
    ]
    return TrajectoryDataset(kept, env_tag=dataset.env_tag)


def _frame_goal_distances(env, states: np.ndarray) -> np.ndarray:
    """Per-frame distance to the goal region: BFS steps (grid) or Euclidean."""
    if isinstance(env, GridMaze):
        dist = oracle.bfs_distances(env, env.layout.goal)
        fx = 1.0 / max(env.layout.width - 1, 1)
        fy = 1.0 / max(env.layout.height - 1, 1)
        xs = np.rint(states[:, 0].astype(np.float64) / fx).astype(np.int64)
        ys = np.rint(states[:, 1].astype(np.float64) / fy).astype(np.int64)
        big = float(env.layout.width * env.layout.height)
        return np.array([dist.get((x, y), big) for x, y in zip(xs, ys)], dtype=np.float64)
    return np.hypot(
        states[:, 0].astype(np.float64) - env.goal_center[0],
        states[:, 1].astype(np.float64) - env.goal_center[1],
    )


def corrupt_near_goal(dataset: TrajectoryDataset, env, radius: float) -> TrajectoryDataset:
    """Drop every trajectory that passes within `radius` of the goal region."""
    if radius < 0:
        raise ConfigError("radius must be >= 0")
    kept = [
        t for t in dataset.trajectories
        if _frame_goal_distances(env, t.states).min() > radius
    ]
    return TrajectoryDataset(kept, env_tag=dataset.env_tag)


def subset(dataset: TrajectoryDataset, fraction: float) -> TrajectoryDataset:
    """Deterministic prefix subset by trajectory count (at least one kept)."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"fraction={fraction} outside [0, 1]")
    k = max(1, int(round(fraction * len(dataset.trajectories)))) if fraction > 0 else 0
    return TrajectoryDataset(dataset.trajectories[:k], env_tag=dataset.env_tag)


def merge(datasets: list) -> TrajectoryDataset:
    trajs = [t for ds in datasets for t in ds.trajectories]
    tag = datasets[0].env_tag if datasets else {}
    return TrajectoryDataset(trajs, env_tag=tag)


def save_dataset(dataset: TrajectoryDataset, path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        header = {
            "version": DATASET_VERSION,
            "env": dataset.env_tag,
            "feature_dim": dataset.feature_dim if dataset.trajectories else 0,
            "n_trajectories": len(dataset.trajectories),
        }
        fh.write(json.dumps(header) + "\n")
        for t in dataset.trajectories:
            record = {
                "states": [[float(v) for v in row] for row in t.states],
                "actions": None if t.actions is None else [int(a) for a in t.actions],
                "meta": t.meta,
            }
            fh.write(json.dumps(record) + "\n")


def load_dataset(path) -> TrajectoryDataset:
    path = Path(path)
    trajs = []
    env_tag = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(lineno, f"invalid JSON ({exc.msg})") from exc
            if lineno == 1:
                version = doc.get("version")
                if version != DATASET_VERSION:
                    raise VersionError(f"dataset version {version!r}, expected {DATASET_VERSION}")
                env_tag = doc.get("env", {})
                continue
            try:
                trajs.append(Trajectory(
                    states=np.array(doc["states"], dtype=np.float32),
                    actions=None if doc["actions"] is None else np.array(doc["actions"]),
                    meta=doc.get("meta", {}),
                ))
            except (KeyError, ConfigError, ValueError) as exc:
                raise DatasetParseError(lineno, str(exc)) from exc
    return TrajectoryDataset(trajs, env_tag=env_tag)
