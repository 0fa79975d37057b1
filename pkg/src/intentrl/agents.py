"""Online RL agents with offline batch mixing, plus BC and JSRL baselines.

Each gradient batch mixes replay transitions with offline prior data at a
fixed ratio; guidance relabels rewards at sample time only. Evaluation is
always greedy and scores extrinsic rewards, so guidance never leaks into
reported returns.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import guidance as guidance_mod
from . import nn
from .data import Trajectory, TrajectoryDataset
from .envs import GridMaze
from .errors import ConfigError, SamplingError
from .guidance import GuidanceConfig


@dataclass
class AgentConfig:
    algo: str = "tabular_q"  # tabular_q | dqn_lite
    offline_ratio: float = 0.5
    replay_capacity: int = 100_000
    batch_size: int = 128
    start_training: int = 1000
    utd: int = 4
    discount: float = 0.98
    learning_rate: float = 0.5  # table step size, or Adam rate for dqn_lite
    tau: float = 0.005
    q_ensemble: int = 1
    soft_backup: bool = False
    temperature: float = 0.1
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_fraction: float = 0.2  # share of env steps over which epsilon anneals
    eval_interval: int = 2000
    eval_episodes: int = 10
    hidden_dims: tuple = (64, 64)
    adam_epsilon: float = 1e-8
    jsrl_max_prefix: int | None = None  # draw per-episode prior prefixes up to this
    seed: int = 0

    def __post_init__(self):
        if self.algo not in ("tabular_q", "dqn_lite"):
            raise ConfigError(f"unknown algo {self.algo!r}")
        if not 0.0 <= self.offline_ratio <= 1.0:
            raise ConfigError("offline_ratio outside [0, 1]")
        if self.q_ensemble < 1:
            raise ConfigError("q_ensemble must be >= 1")


class ReplayBuffer:
    """FIFO ring buffer of (s, a, r_extrinsic, s', done) transitions."""

    def __init__(self, capacity: int, feature_dim: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, feature_dim), dtype=np.float32)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity, dtype=np.float64)
        self.s_next = np.zeros((capacity, feature_dim), dtype=np.float32)
        self.done = np.zeros(capacity, dtype=bool)
        self.ptr = 0
        self.size = 0

    def add(self, s, a, r, s_next, done) -> None:
        i = self.ptr
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s_next[i] = s_next
        self.done[i] = done
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> dict:
        if self.size == 0:
            raise SamplingError("replay buffer is empty")
        idx = rng.integers(0, self.size, size=n)
        return {
            "s": self.s[idx], "a": self.a[idx], "r": self.r[idx],
            "s_next": self.s_next[idx], "done": self.done[idx],
        }


@dataclass
class OfflineTransitions:
    """Flattened action-labeled dataset with rewards/dones recomputed per goal."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.a)

    def sample(self, n: int, rng: np.random.Generator) -> dict:
        if len(self) == 0:
            raise SamplingError("offline transition set is empty")
        idx = rng.integers(0, len(self), size=n)
        return {
            "s": self.s[idx], "a": self.a[idx], "r": self.r[idx],
            "s_next": self.s_next[idx], "done": self.done[idx],
        }


def offline_transitions(dataset: TrajectoryDataset, env) -> OfflineTransitions:
    """Rewards and done flags are recomputed against the env's current goal."""
    if not dataset.has_actions:
        raise ConfigError("offline mixing needs action-labeled trajectories")
    ss, aa, ns = [], [], []
    for t in dataset.trajectories:
        ss.append(t.states[:-1])
        ns.append(t.states[1:])
        aa.append(t.actions)
    s = np.concatenate(ss)
    s_next = np.concatenate(ns)
    a = np.concatenate(aa)
    in_goal = env.features_in_goal(s_next)
    return OfflineTransitions(s=s, a=a, r=in_goal.astype(np.float64),
                              s_next=s_next, done=in_goal.copy())


def mixed_batch(replay: ReplayBuffer, offline: OfflineTransitions | None,
                batch_size: int, offline_ratio: float, rng: np.random.Generator) -> dict:
    """floor(ratio * B) offline rows, the rest from replay, both uniform."""
    n_off = int(np.floor(offline_ratio * batch_size))
    n_on = batch_size - n_off
    if n_off > 0 and (offline is None or len(offline) == 0):
        if replay.size == 0:
            raise SamplingError("no offline data and empty replay buffer")
        raise SamplingError("offline_ratio > 0 but offline dataset is empty")
    if n_on > 0 and replay.size == 0:
        raise SamplingError("replay buffer is empty")
    parts = []
    if n_off > 0:
        parts.append(offline.sample(n_off, rng))
    if n_on > 0:
        parts.append(replay.sample(n_on, rng))
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


class TabularQPolicy:
    """Per-cell action values for grid envs, with an optional small ensemble."""

    kind = "tabular_q"

    def __init__(self, grid_shape: tuple, n_actions: int, n_members: int = 1):
        self.grid_shape = (int(grid_shape[0]), int(grid_shape[1]))
        self.n_actions = n_actions
        n = self.grid_shape[0] * self.grid_shape[1]
        self.q = np.zeros((n_members, n, n_actions), dtype=np.float64)
        self._fx = 1.0 / max(self.grid_shape[0] - 1, 1)
        self._fy = 1.0 / max(self.grid_shape[1] - 1, 1)

    def ids(self, features) -> np.ndarray:
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        xs = np.rint(f[:, 0] / self._fx).astype(np.int64)
        ys = np.rint(f[:, 1] / self._fy).astype(np.int64)
        return xs * self.grid_shape[1] + ys

    def q_values(self, features) -> np.ndarray:
        """(B, n_actions) ensemble-min action values."""
        return self.q[:, self.ids(features), :].min(axis=0)

    def greedy_action(self, features) -> int:
        return int(np.argmax(self.q_values(features)[0]))

    def save(self, path) -> None:
        doc = {
            "kind": self.kind,
            "grid_shape": list(self.grid_shape),
            "n_actions": self.n_actions,
            "q": self.q.tolist(),
        }
        Path(path).write_text(json.dumps(doc))

    @staticmethod
    def load(path) -> "TabularQPolicy":
        doc = json.loads(Path(path).read_text())
        policy = TabularQPolicy(doc["grid_shape"], doc["n_actions"],
                                n_members=len(doc["q"]))
        policy.q = np.array(doc["q"], dtype=np.float64)
        return policy


class DqnPolicy:
    """Small MLP action-value ensemble with Polyak targets."""

    kind = "dqn_lite"

    def __init__(self, feature_dim: int, n_actions: int, hidden_dims=(64, 64),
                 n_members: int = 2, seed: int = 0, members=None, targets=None):
        self.feature_dim = feature_dim
        self.n_actions = n_actions
        self.hidden_dims = tuple(hidden_dims)
        self.n_members = n_members
        if members is None:
            dims = [feature_dim, *hidden_dims, n_actions]
            members = [
                nn.init_dense_net(dims, activation="relu", layer_norm=True,
                                  seed=seed * 977 + m)
                for m in range(n_members)
            ]
        self.members = members
        self.targets = [m.copy() for m in members] if targets is None else targets

    def q_values(self, features, use: str = "online") -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float32))
        nets = self.members if use == "online" else self.targets
        return np.stack([nn.forward(net, x) for net in nets]).min(axis=0)

    def greedy_action(self, features) -> int:
        return int(np.argmax(self.q_values(features)[0]))

    def polyak(self, tau: float) -> None:
        for online, target in zip(self.members, self.targets):
            nn.polyak_update(target.parameters(), online.parameters(), tau)

    def save(self, path, config: dict | None = None) -> None:
        # One checkpoint per member pair, concatenated via the nn container.
        arch_extra = {
            "policy_kind": self.kind,
            "n_actions": self.n_actions,
            "n_members": self.n_members,
        }
        path = Path(path)
        for i, (m, t) in enumerate(zip(self.members, self.targets)):
            nn.save_checkpoint(m, Path(str(path) + f".m{i}"), config=None)
            nn.save_checkpoint(t, Path(str(path) + f".t{i}"), config=None)
        Path(path).write_text(json.dumps({**arch_extra,
                                          "feature_dim": self.feature_dim,
                                          "hidden_dims": list(self.hidden_dims)}))
        if config is not None:
            Path(str(path) + ".json").write_text(json.dumps(config, sort_keys=True))

    @staticmethod
    def load(path) -> "DqnPolicy":
        path = Path(path)
        doc = json.loads(path.read_text())
        members, targets = [], []
        for i in range(doc["n_members"]):
            members.append(nn.load_checkpoint(Path(str(path) + f".m{i}"))[0])
            targets.append(nn.load_checkpoint(Path(str(path) + f".t{i}"))[0])
        return DqnPolicy(doc["feature_dim"], doc["n_actions"], doc["hidden_dims"],
                         n_members=doc["n_members"], members=members, targets=targets)


class BcPolicy:
    """Softmax action classifier trained on action-labeled offline data."""

    def __init__(self, net: nn.DenseNet, n_actions: int):
        self.net = net
        self.n_actions = n_actions

    def logits(self, features) -> np.ndarray:
        return nn.forward(self.net, np.atleast_2d(np.asarray(features, dtype=np.float32)))

    def greedy_action(self, features) -> int:
        return int(np.argmax(self.logits(features)[0]))


def bc_train(offline_dataset: TrajectoryDataset, epochs: int, seed: int,
             n_actions: int | None = None, hidden_dims=(64, 64),
             learning_rate: float = 1e-3, batch_size: int = 256) -> BcPolicy:
    """Cross-entropy behavior cloning; deterministic per seed."""
    if len(offline_dataset) == 0:
        raise ConfigError("cannot clone from an empty dataset")
    if not offline_dataset.has_actions:
        raise ConfigError("behavior cloning needs action-labeled trajectories")
    states = np.concatenate([t.states[:-1] for t in offline_dataset.trajectories])
    actions = np.concatenate([t.actions for t in offline_dataset.trajectories])
    if n_actions is None:
        n_actions = int(actions.max()) + 1
    net = nn.init_dense_net([states.shape[1], *hidden_dims, n_actions],
                            activation="relu", layer_norm=True, seed=seed)
    opt = nn.init_adam(net.parameters(), learning_rate)
    rng = np.random.default_rng(seed)
    n = len(actions)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            x = states[idx]
            y, cache = nn.forward_cached(net, x)
            shifted = y - y.max(axis=1, keepdims=True)
            expv = np.exp(shifted)
            probs = expv / expv.sum(axis=1, keepdims=True)
            grad = probs.copy()
            grad[np.arange(len(idx)), actions[idx]] -= 1.0
            grad /= len(idx)
            grads, _ = nn.backward(net, cache, grad.astype(np.float32))
            nn.adam_step(opt, net.parameters(), grads)
    return BcPolicy(net, n_actions)


def jsrl_rollout(prior, agent_policy, env, h: int, rng: np.random.Generator) -> Trajectory:
    """One episode: the prior acts greedily for h steps, the agent after."""
    state = env.reset()
    feats = [env.state_features(state)]
    actions = []
    done = False
    t = 0
    while not done:
        actor = prior if t < h else agent_policy
        a = actor.greedy_action(env.state_features(state))
        state, _, done = env.step(a)
        feats.append(env.state_features(state))
        actions.append(a)
        t += 1
    return Trajectory(states=np.stack(feats), actions=np.array(actions),
                      meta={"source": "jsrl", "prefix": h})


def evaluate(policy, env, n_episodes: int = 10, seed: int = 0) -> tuple:
    """Greedy rollouts on a fresh env copy; extrinsic rewards only."""
    returns = np.zeros(n_episodes)
    successes = np.zeros(n_episodes)
    for ep in range(n_episodes):
        e = env.clone()
        state = e.reset()
        total = 0.0
        done = False
        while not done:
            a = policy.greedy_action(e.state_features(state))
            state, r, done = e.step(a)
            total += r
        returns[ep] = total
        successes[ep] = 1.0 if total > 0 else 0.0
    return float(returns.mean()), float(returns.std()), float(successes.mean())


def _epsilon_at(step: int, total: int, config: AgentConfig) -> float:
    anneal = max(1, int(config.epsilon_fraction * total))
    frac = min(1.0, step / anneal)
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)


def _tabular_update(policy: TabularQPolicy, batch: dict, rewards: np.ndarray,
                    config: AgentConfig) -> None:
    s_id = policy.ids(batch["s"])
    n_id = policy.ids(batch["s_next"])
    not_done = 1.0 - batch["done"].astype(np.float64)
    next_q = policy.q[:, n_id, :].min(axis=0)  # ensemble-min backup
    if config.soft_backup:
        t = config.temperature
        boot = t * np.log(np.exp(next_q / t).sum(axis=1))
    else:
        boot = next_q.max(axis=1)
    target = rewards + config.discount * not_done * boot
    for m in range(policy.q.shape[0]):
        current = policy.q[m, s_id, batch["a"]]
        residual = target - current
        flat = s_id * policy.n_actions + batch["a"]
        uniq, inverse = np.unique(flat, return_inverse=True)
        sums = np.bincount(inverse, weights=residual, minlength=len(uniq))
        counts = np.bincount(inverse, minlength=len(uniq))
        view = policy.q[m].reshape(-1)
        view[uniq] += config.learning_rate * sums / counts


def _dqn_update(policy: DqnPolicy, opt_states: list, batch: dict, rewards: np.ndarray,
                config: AgentConfig) -> None:
    x = batch["s"].astype(np.float32)
    not_done = 1.0 - batch["done"].astype(np.float64)
    next_q = policy.q_values(batch["s_next"], use="target")
    if config.soft_backup:
        t = config.temperature
        boot = t * np.log(np.exp(next_q / t).sum(axis=1))
    else:
        boot = next_q.max(axis=1)
    target = rewards + config.discount * not_done * boot
    b = len(target)
    rows = np.arange(b)
    for net, opt in zip(policy.members, opt_states):
        y, cache = nn.forward_cached(net, x)
        pred = y[rows, batch["a"]]
        grad = np.zeros_like(y)
        grad[rows, batch["a"]] = 2.0 * (pred - target) / b
        grads, _ = nn.backward(net, cache, grad)
        nn.adam_step(opt, net.parameters(), grads)
    policy.polyak(config.tau)


def _make_relabeler(gcfg: GuidanceConfig, env):
    """Batch reward relabeler; on grid envs the frozen values are precomputed
    per cell once, which is exact because the model never changes online."""
    if gcfg.mode == "none":
        return lambda r, s, s_next, done: r
    if isinstance(env, GridMaze):
        w, h = env.layout.width, env.layout.height
        cells = [(x, y) for x in range(w) for y in range(h)]
        feats = np.stack([env.state_features(c) for c in cells])
        vals = gcfg.state_values(feats)
        fx = 1.0 / max(w - 1, 1)
        fy = 1.0 / max(h - 1, 1)

        def lookup(f):
            f = np.asarray(f, dtype=np.float64)
            xs = np.rint(f[:, 0] / fx).astype(np.int64)
            ys = np.rint(f[:, 1] / fy).astype(np.int64)
            return vals[xs * h + ys]

        if gcfg.mode == "additive_value":
            return lambda r, s, s_next, done: r + gcfg.lam * lookup(s)
        return lambda r, s, s_next, done: r + gcfg.lam * (
            gcfg.gamma * lookup(s_next) * (1.0 - done.astype(np.float64)) - lookup(s))
    return lambda r, s, s_next, done: guidance_mod.relabel_batch(r, s, s_next, done, gcfg)


def make_policy(env, config: AgentConfig):
    if config.algo == "tabular_q":
        if not isinstance(env, GridMaze):
            raise ConfigError("tabular_q needs a grid environment")
        return TabularQPolicy((env.layout.width, env.layout.height), env.n_actions,
                              n_members=config.q_ensemble)
    return DqnPolicy(env.feature_dim, env.n_actions, hidden_dims=config.hidden_dims,
                     n_members=max(2, config.q_ensemble), seed=config.seed)


def train_online(env, offline_dataset: TrajectoryDataset | None, agent_config: AgentConfig,
                 guidance_config: GuidanceConfig | None, total_env_steps: int,
                 jsrl_prior: BcPolicy | None = None) -> tuple:
    """Epsilon-greedy acting with mixed-batch updates and guided relabeling.

    Returns (policy, metrics) where metrics rows are
    (env_step, eval_return_mean, eval_return_std, success_rate).
    """
    gcfg = guidance_config or GuidanceConfig()
    config = agent_config
    offline = None
    if config.offline_ratio > 0:
        if offline_dataset is None or not offline_dataset.has_actions:
            raise ConfigError("offline_ratio > 0 needs an action-labeled offline dataset")
        offline = offline_transitions(offline_dataset, env)
    policy = make_policy(env, config)
    opt_states = None
    if config.algo == "dqn_lite":
        opt_states = [
            nn.init_adam(net.parameters(), config.learning_rate, config.adam_epsilon)
            for net in policy.members
        ]
    replay = ReplayBuffer(config.replay_capacity, env.feature_dim)
    rng = np.random.default_rng(config.seed)
    relabel = _make_relabeler(gcfg, env)
    metrics = []

    train_env = env.clone()
    state = train_env.reset()
    prefix = 0
    if jsrl_prior is not None:
        cap = config.jsrl_max_prefix if config.jsrl_max_prefix is not None else env.horizon
        prefix = int(rng.integers(0, cap + 1))
    steps_in_episode = 0

    for step in range(1, total_env_steps + 1):
        feats = train_env.state_features(state)
        if jsrl_prior is not None and steps_in_episode < prefix:
            a = jsrl_prior.greedy_action(feats)
        else:
            eps = _epsilon_at(step, total_env_steps, config)
            if rng.random() < eps:
                a = int(rng.integers(train_env.n_actions))
            else:
                a = policy.greedy_action(feats)
        nxt, r, done = train_env.step(a)
        # Done flag marks goal entry only; horizon cutoffs still bootstrap.
        goal_done = r > 0
        replay.add(feats, a, r, train_env.state_features(nxt), goal_done)
        steps_in_episode += 1
        if done:
            state = train_env.reset()
            steps_in_episode = 0
            if jsrl_prior is not None:
                cap = config.jsrl_max_prefix if config.jsrl_max_prefix is not None else env.horizon
                prefix = int(rng.integers(0, cap + 1))
        else:
            state = nxt

        if step >= config.start_training:
            for _ in range(config.utd):
                batch = mixed_batch(replay, offline, config.batch_size,
                                    config.offline_ratio, rng)
                rewards = relabel(batch["r"], batch["s"], batch["s_next"], batch["done"])
                if config.algo == "tabular_q":
                    _tabular_update(policy, batch, rewards, config)
                else:
                    _dqn_update(policy, opt_states, batch, rewards, config)

        if step % config.eval_interval == 0 or step == total_env_steps:
            mean_ret, std_ret, success = evaluate(policy, env,
                                                  n_episodes=config.eval_episodes,
                                                  seed=config.seed)
            metrics.append((step, mean_ret, std_ret, success))

    return policy, metrics
