"""Intent-conditioned value functions trained by expectile TD regression.

A model scores V(s, s_plus, g): the discounted reward-to-go for reaching the
outcome s_plus while acting optimally toward the intent g, under a shifted
sparse reward (0 on arrival, -1 per step). Heads: a tabular array over grid
cell ids (the bridge to exact oracles), a monolithic MLP over the
concatenated inputs, and a factored multilinear form phi(s)^T T(g) psi(s+).
Network heads keep a Polyak-averaged target copy and a 2-member ensemble
reduced by min.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import IcvfBatch, SamplerConfig, TrajectoryDataset, sample_icvf_arrays
from .errors import ConfigError, NumericError, ShapeError, VersionError

MODEL_VERSION = 1

HEAD_KINDS = ("tabular", "monolithic", "multilinear")


@dataclass
class IcvfTrainConfig:
    """Expectile TD training settings.

    Defaults follow the state-based setup: per-sample reward is
    reward_scale * 1(s = s_plus) + reward_shift, so converged values count
    negative discounted steps-to-reach.
    """

    discount: float = 0.98
    expectile: float = 0.9
    learning_rate: float = 3e-4
    epsilon: float = 1e-8
    tau: float = 0.005
    batch_size: int = 64
    reward_shift: float = -1.0
    reward_scale: float = 1.0
    steps: int = 50_000
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0.5 <= self.expectile < 1.0:
            raise ConfigError(f"expectile={self.expectile} outside [0.5, 1)")
        if not 0.0 < self.discount < 1.0:
            raise ConfigError(f"discount={self.discount} outside (0, 1)")


class IcvfModel:
    """Shared surface for the three head kinds."""

    head_kind: str
    feature_dim: int
    n_members: int

    def member_values(self, s, s_plus, g, use: str = "target") -> np.ndarray:
        """(n_members, B) raw per-member values."""
        raise NotImplementedError

    def value_batch(self, s, s_plus, g, use: str = "target", reduce="min") -> np.ndarray:
        vals = self.member_values(s, s_plus, g, use)
        if reduce == "min":
            return vals.min(axis=0)
        if reduce == "mean":
            return vals.mean(axis=0)
        if isinstance(reduce, int):
            return vals[reduce]
        raise ConfigError(f"unknown reduce {reduce!r}")

    def value(self, s, s_plus, g, use: str = "target", reduce="min") -> float:
        s = np.atleast_2d(np.asarray(s, dtype=np.float32))
        s_plus = np.atleast_2d(np.asarray(s_plus, dtype=np.float32))
        g = np.atleast_2d(np.asarray(g, dtype=np.float32))
        return float(self.value_batch(s, s_plus, g, use=use, reduce=reduce)[0])

    def polyak(self, tau: float) -> None:
        raise NotImplementedError

    def arch(self) -> dict:
        raise NotImplementedError


class TabularIcvf(IcvfModel):
    """Dense (n, n, n) table over grid cell ids; unseen triples read 0.

    The online table doubles as the target: a tabular TD update bootstraps
    from the same table it writes (equivalently, tau = 1 after every step).
    """

    head_kind = "tabular"
    n_members = 1

    def __init__(self, grid_shape: tuple, table: np.ndarray | None = None):
        self.grid_shape = (int(grid_shape[0]), int(grid_shape[1]))
        self.feature_dim = 2
        n = self.grid_shape[0] * self.grid_shape[1]
        self.table = np.zeros((n, n, n), dtype=np.float64) if table is None else table
        self._fx = 1.0 / max(self.grid_shape[0] - 1, 1)
        self._fy = 1.0 / max(self.grid_shape[1] - 1, 1)

    def ids(self, features) -> np.ndarray:
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        xs = np.rint(f[:, 0] / self._fx).astype(np.int64)
        ys = np.rint(f[:, 1] / self._fy).astype(np.int64)
        return xs * self.grid_shape[1] + ys

    def set_entry(self, s_id: int, sp_id: int, g_id: int, value: float) -> None:
        self.table[s_id, sp_id, g_id] = value

    def member_values(self, s, s_plus, g, use: str = "target") -> np.ndarray:
        return self.table[self.ids(s), self.ids(s_plus), self.ids(g)][None, :]

    def polyak(self, tau: float) -> None:
        pass  # online table is its own target

    def arch(self) -> dict:
        return {"head_kind": self.head_kind, "grid_shape": list(self.grid_shape)}


class MonolithicIcvf(IcvfModel):
    """Single MLP over the concatenated (s, s_plus, g) features."""

    head_kind = "monolithic"

    def __init__(self, feature_dim: int, hidden_dims=(64, 64), layer_norm: bool = True,
                 activation: str = "relu", n_members: int = 2, seed: int = 0,
                 members=None, targets=None):
        self.feature_dim = feature_dim
        self.hidden_dims = tuple(hidden_dims)
        self.layer_norm = layer_norm
        self.activation = activation
        self.n_members = n_members
        if members is None:
            dims = [3 * feature_dim, *hidden_dims, 1]
            members = [
                nn.init_dense_net(dims, activation=activation, layer_norm=layer_norm,
                                  seed=seed * 1000 + m)
                for m in range(n_members)
            ]
        self.members = members
        self.targets = [m.copy() for m in members] if targets is None else targets

    def _nets(self, use: str):
        if use == "online":
            return self.members
        if use == "target":
            return self.targets
        raise ConfigError(f"unknown parameter set {use!r}")

    def _inputs(self, s, s_plus, g) -> np.ndarray:
        s, s_plus, g = (np.atleast_2d(np.asarray(a, dtype=np.float32)) for a in (s, s_plus, g))
        if s.shape[1] != self.feature_dim:
            raise ShapeError(f"feature dim {s.shape[1]} != {self.feature_dim}")
        return np.concatenate([s, s_plus, g], axis=1)

    def member_values(self, s, s_plus, g, use: str = "target") -> np.ndarray:
        x = self._inputs(s, s_plus, g)
        return np.stack([nn.forward(net, x)[:, 0] for net in self._nets(use)])

    def polyak(self, tau: float) -> None:
        for online, target in zip(self.members, self.targets):
            nn.polyak_update(target.parameters(), online.parameters(), tau)

    def arch(self) -> dict:
        return {
            "head_kind": self.head_kind,
            "feature_dim": self.feature_dim,
            "hidden_dims": list(self.hidden_dims),
            "layer_norm": self.layer_norm,
            "activation": self.activation,
            "n_members": self.n_members,
        }


class MultilinearIcvf(IcvfModel):
    """Factored head: phi(s)^T T(g) psi(s_plus) with per-part subnets."""

    head_kind = "multilinear"

    def __init__(self, feature_dim: int, latent_dim: int = 16, hidden_dims=(64,),
                 layer_norm: bool = True, activation: str = "relu", n_members: int = 2,
                 seed: int = 0, members=None, targets=None):
        self.feature_dim = feature_dim
        self.latent_dim = latent_dim
        self.hidden_dims = tuple(hidden_dims)
        self.layer_norm = layer_norm
        self.activation = activation
        self.n_members = n_members
        if members is None:
            members = []
            for m in range(n_members):
                base = seed * 1000 + m * 10
                members.append({
                    "phi": nn.init_dense_net([feature_dim, *hidden_dims, latent_dim],
                                             activation=activation, layer_norm=layer_norm,
                                             seed=base + 1),
                    "psi": nn.init_dense_net([feature_dim, *hidden_dims, latent_dim],
                                             activation=activation, layer_norm=layer_norm,
                                             seed=base + 2),
                    "tmat": nn.init_dense_net([feature_dim, *hidden_dims, latent_dim * latent_dim],
                                              activation=activation, layer_norm=layer_norm,
                                              seed=base + 3),
                })
        self.members = members
        self.targets = (
            [{k: net.copy() for k, net in m.items()} for m in members]
            if targets is None else targets
        )

    def _nets(self, use: str):
        if use == "online":
            return self.members
        if use == "target":
            return self.targets
        raise ConfigError(f"unknown parameter set {use!r}")

    def _member_value(self, member, s, s_plus, g) -> np.ndarray:
        phi = nn.forward(member["phi"], s)
        psi = nn.forward(member["psi"], s_plus)
        tm = nn.forward(member["tmat"], g).reshape(len(phi), self.latent_dim, self.latent_dim)
        return np.einsum("bi,bij,bj->b", phi, tm, psi)

    def member_values(self, s, s_plus, g, use: str = "target") -> np.ndarray:
        s, s_plus, g = (np.atleast_2d(np.asarray(a, dtype=np.float32)) for a in (s, s_plus, g))
        return np.stack([self._member_value(m, s, s_plus, g) for m in self._nets(use)])

    @staticmethod
    def member_parameters(member) -> list:
        return (member["phi"].parameters() + member["psi"].parameters()
                + member["tmat"].parameters())

    def polyak(self, tau: float) -> None:
        for online, target in zip(self.members, self.targets):
            nn.polyak_update(self.member_parameters(target),
                             self.member_parameters(online), tau)

    def arch(self) -> dict:
        return {
            "head_kind": self.head_kind,
            "feature_dim": self.feature_dim,
            "latent_dim": self.latent_dim,
            "hidden_dims": list(self.hidden_dims),
            "layer_norm": self.layer_norm,
            "activation": self.activation,
            "n_members": self.n_members,
        }


def create_icvf(head_kind: str, feature_dim: int = 2, *, grid_shape=None,
                hidden_dims=None, latent_dim: int = 16, layer_norm: bool = True,
                activation: str = "relu", n_members: int = 2, seed: int = 0) -> IcvfModel:
    if head_kind == "tabular":
        if grid_shape is None:
            raise ConfigError("tabular head needs grid_shape=(width, height)")
        return TabularIcvf(grid_shape)
    if head_kind == "monolithic":
        return MonolithicIcvf(feature_dim, hidden_dims=hidden_dims or (64, 64),
                              layer_norm=layer_norm, activation=activation,
                              n_members=n_members, seed=seed)
    if head_kind == "multilinear":
        return MultilinearIcvf(feature_dim, latent_dim=latent_dim,
                               hidden_dims=hidden_dims or (64,), layer_norm=layer_norm,
                               activation=activation, n_members=n_members, seed=seed)
    raise ConfigError(f"unknown head kind {head_kind!r}, expected one of {HEAD_KINDS}")


def expectile_weight(alpha: float, advantage):
    """alpha where the advantage is positive, 1 - alpha otherwise."""
    adv = np.asarray(advantage, dtype=np.float64)
    w = np.where(adv > 0.0, alpha, 1.0 - alpha)
    return float(w) if np.isscalar(advantage) or adv.ndim == 0 else w


def _rewards(batch: IcvfBatch, config: IcvfTrainConfig) -> tuple:
    eq = batch.s_eq_splus.astype(np.float64)
    r = config.reward_scale * eq + config.reward_shift
    return r, eq  # eq doubles as the done mask


def td_target(batch: IcvfBatch, model: IcvfModel, config: IcvfTrainConfig) -> np.ndarray:
    """r + gamma * (1 - done) * V_target(s', s_plus, g), done where s = s_plus."""
    r, done = _rewards(batch, config)
    v_next = model.value_batch(batch.s_next, batch.s_plus, batch.g, use="target", reduce="min")
    return r + config.discount * (1.0 - done) * v_next


def advantage(batch: IcvfBatch, model: IcvfModel, config: IcvfTrainConfig) -> np.ndarray:
    """Shifted goal-reaching advantage of the observed transition, on target values."""
    ind = config.reward_scale * batch.s_eq_g.astype(np.float64) + config.reward_shift
    v_next = model.value_batch(batch.s_next, batch.g, batch.g, use="target", reduce="min")
    v_curr = model.value_batch(batch.s, batch.g, batch.g, use="target", reduce="min")
    return ind + config.discount * v_next - v_curr


class IcvfTrainer:
    """Owns optimizer state and the sampling RNG for one training run."""

    def __init__(self, model: IcvfModel, config: IcvfTrainConfig):
        self.model = model
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.opt_states = None
        if model.head_kind == "monolithic":
            self.opt_states = [
                nn.init_adam(net.parameters(), config.learning_rate, config.epsilon)
                for net in model.members
            ]
        elif model.head_kind == "multilinear":
            self.opt_states = [
                nn.init_adam(MultilinearIcvf.member_parameters(m),
                             config.learning_rate, config.epsilon)
                for m in model.members
            ]

    def step(self, batch: IcvfBatch) -> tuple:
        """One expectile TD update; returns (loss, positive-advantage fraction)."""
        cfg = self.config
        target = td_target(batch, self.model, cfg)
        adv = advantage(batch, self.model, cfg)
        w = expectile_weight(cfg.expectile, adv)
        if self.model.head_kind == "tabular":
            loss = self._tabular_step(batch, target, w)
        elif self.model.head_kind == "monolithic":
            loss = self._monolithic_step(batch, target, w)
        else:
            loss = self._multilinear_step(batch, target, w)
        self.model.polyak(cfg.tau)
        return loss, float((adv > 0).mean())

    def _tabular_step(self, batch: IcvfBatch, target: np.ndarray, w: np.ndarray) -> float:
        model: TabularIcvf = self.model
        s_id = model.ids(batch.s)
        sp_id = model.ids(batch.s_plus)
        g_id = model.ids(batch.g)
        current = model.table[s_id, sp_id, g_id]
        residual = target - current
        # Duplicate triples within one batch average their updates so the
        # effective step never exceeds learning_rate * weight.
        flat = np.ravel_multi_index((s_id, sp_id, g_id), model.table.shape)
        uniq, inverse = np.unique(flat, return_inverse=True)
        sums = np.bincount(inverse, weights=w * residual, minlength=len(uniq))
        counts = np.bincount(inverse, minlength=len(uniq))
        model.table.flat[uniq] += self.config.learning_rate * sums / counts
        return float(np.mean(w * residual**2))

    def _monolithic_step(self, batch: IcvfBatch, target: np.ndarray, w: np.ndarray) -> float:
        model: MonolithicIcvf = self.model
        x = model._inputs(batch.s, batch.s_plus, batch.g)
        b = len(target)
        losses = []
        for idx, (net, opt) in enumerate(zip(model.members, self.opt_states)):
            y, cache = nn.forward_cached(net, x)
            pred = y[:, 0]
            loss = float(np.mean(w * (pred - target) ** 2))
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss in ensemble member {idx}")
            grad_y = np.zeros_like(y)
            grad_y[:, 0] = 2.0 * w * (pred - target) / b
            grads, _ = nn.backward(net, cache, grad_y)
            nn.adam_step(opt, net.parameters(), grads)
            losses.append(loss)
        return float(np.mean(losses))

    def _multilinear_step(self, batch: IcvfBatch, target: np.ndarray, w: np.ndarray) -> float:
        model: MultilinearIcvf = self.model
        s = np.atleast_2d(batch.s.astype(np.float32))
        sp = np.atleast_2d(batch.s_plus.astype(np.float32))
        g = np.atleast_2d(batch.g.astype(np.float32))
        losses = []
        for idx, (member, opt) in enumerate(zip(model.members, self.opt_states)):
            pred, caches = multilinear_forward(member, s, sp, g, model.latent_dim)
            loss = float(np.mean(w * (pred - target) ** 2))
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss in ensemble member {idx}")
            dv = 2.0 * w * (pred - target) / len(target)
            grads = multilinear_backward(member, caches, dv)
            nn.adam_step(opt, MultilinearIcvf.member_parameters(member), grads)
            losses.append(loss)
        return float(np.mean(losses))


def multilinear_forward(member: dict, s, sp, g, latent: int) -> tuple:
    """Per-member factored value phi(s)^T T(g) psi(s+); returns (pred, caches)."""
    phi, phi_cache = nn.forward_cached(member["phi"], s)
    psi, psi_cache = nn.forward_cached(member["psi"], sp)
    tm_flat, tm_cache = nn.forward_cached(member["tmat"], g)
    tm = tm_flat.reshape(len(phi), latent, latent)
    pred = np.einsum("bi,bij,bj->b", phi, tm, psi)
    return pred, (phi, psi, tm, phi_cache, psi_cache, tm_cache)


def multilinear_backward(member: dict, caches, dv: np.ndarray) -> list:
    """Gradients of sum(dv * pred) wrt the member's parameters (phi, psi, T order)."""
    phi, psi, tm, phi_cache, psi_cache, tm_cache = caches
    b, latent = phi.shape[0], phi.shape[1]
    dv = dv[:, None]
    g_phi, _ = nn.backward(member["phi"], phi_cache,
                           dv * np.einsum("bij,bj->bi", tm, psi))
    g_psi, _ = nn.backward(member["psi"], psi_cache,
                           dv * np.einsum("bi,bij->bj", phi, tm))
    g_tm, _ = nn.backward(member["tmat"], tm_cache,
                          (dv[:, :, None] * np.einsum("bi,bj->bij", phi, psi))
                          .reshape(b, latent * latent))
    return g_phi + g_psi + g_tm


def train_step(model: IcvfModel, batch, config: IcvfTrainConfig,
               trainer: IcvfTrainer | None = None) -> tuple:
    """One update on a batch (IcvfBatch or list of IcvfSample); returns (model, loss)."""
    if isinstance(batch, list):
        batch = IcvfBatch.from_samples(batch)
    if trainer is None:
        trainer = IcvfTrainer(model, config)
    loss, _ = trainer.step(batch)
    return model, loss


def train(dataset: TrajectoryDataset, config: IcvfTrainConfig,
          init: str = "fresh", head_kind: str = "monolithic",
          model: IcvfModel | None = None, grid_shape=None,
          head_options: dict | None = None, curve_points: int = 200) -> tuple:
    """Run config.steps expectile TD updates over sampled batches.

    init is "fresh" or a checkpoint path (the finetuning entry point).
    Returns (model, curve) where curve rows are
    (step, loss, positive-advantage fraction).
    """
    if model is None:
        if init != "fresh":
            model = load_model(init)
            if model.feature_dim != dataset.feature_dim:
                raise VersionError(
                    f"checkpoint feature dim {model.feature_dim} != dataset {dataset.feature_dim}")
        else:
            opts = dict(head_options or {})
            model = create_icvf(head_kind, feature_dim=dataset.feature_dim,
                                grid_shape=grid_shape, seed=config.seed, **opts)
    trainer = IcvfTrainer(model, config)
    curve = []
    stride = max(1, config.steps // max(curve_points, 1))
    for step in range(config.steps):
        batch = sample_icvf_arrays(dataset, config.sampler, config.batch_size, trainer.rng)
        loss, pos_frac = trainer.step(batch)
        if step % stride == 0 or step == config.steps - 1:
            curve.append((step, loss, pos_frac))
    return model, curve


def value_heatmap(model: IcvfModel, env, goal=None) -> np.ndarray:
    """V(s, g, g) per grid cell, walls as NaN; goal defaults to the env's goal."""
    layout = env.layout
    if goal is None:
        g_feat = env.goal_features()
    elif isinstance(goal, tuple):
        g_feat = env.state_features(goal)
    else:
        g_feat = np.asarray(goal, dtype=np.float32)
    cells = layout.open_cells()
    feats = np.stack([env.state_features(c) for c in cells])
    goals = np.tile(g_feat, (len(cells), 1))
    vals = model.value_batch(feats, goals, goals, use="target", reduce="min")
    grid = np.full((layout.width, layout.height), np.nan)
    for (x, y), v in zip(cells, vals):
        grid[x, y] = v
    return grid


def save_model(model: IcvfModel, path, config: dict | None = None) -> None:
    """Same wire format as nn checkpoints, with the head descriptor in the header."""
    path = Path(path)
    arch = {"version": MODEL_VERSION, **model.arch()}
    if model.head_kind == "tabular":
        blobs = [model.table]
        arch["nets"] = []
    elif model.head_kind == "monolithic":
        blobs, arch["nets"] = [], []
        for group, nets in (("online", model.members), ("target", model.targets)):
            for net in nets:
                arch["nets"].append({"group": group, **net.arch()})
                blobs.extend(net.parameters())
    else:
        blobs, arch["nets"] = [], []
        for group, members in (("online", model.members), ("target", model.targets)):
            for member in members:
                for part in ("phi", "psi", "tmat"):
                    arch["nets"].append({"group": group, "part": part, **member[part].arch()})
                    blobs.extend(member[part].parameters())
    header = json.dumps(arch, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in blobs)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", nn.CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(blob)
    if config is not None:
        Path(str(path) + ".json").write_text(json.dumps(config, sort_keys=True, indent=2))


def load_model(path) -> IcvfModel:
    path = Path(path)
    raw = path.read_bytes()
    version, hlen = struct.unpack_from("<II", raw, 0)
    if version != nn.CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {nn.CHECKPOINT_VERSION}")
    arch = json.loads(raw[8:8 + hlen].decode("utf-8"))
    if arch.get("version") != MODEL_VERSION:
        raise VersionError(f"model version {arch.get('version')}, expected {MODEL_VERSION}")
    blob = np.frombuffer(raw[8 + hlen:], dtype="<f4")
    offset = 0

    def take(shape, dtype=np.float32):
        nonlocal offset
        n = int(np.prod(shape))
        arr = blob[offset:offset + n].reshape(shape).astype(dtype)
        offset += n
        return arr

    def read_net(spec) -> nn.DenseNet:
        layers = []
        for layer_spec in spec["layers"]:
            fan_in, fan_out = layer_spec["fan_in"], layer_spec["fan_out"]
            w = take((fan_in, fan_out))
            b = take((fan_out,))
            ln = layer_spec["layer_norm"]
            layers.append(nn.DenseLayer(
                w=w, b=b, activation=layer_spec["activation"], layer_norm=ln,
                ln_scale=take((fan_out,)) if ln else None,
                ln_shift=take((fan_out,)) if ln else None,
            ))
        return nn.DenseNet(layers)

    kind = arch["head_kind"]
    if kind == "tabular":
        w, h = arch["grid_shape"]
        n = w * h
        table = take((n, n, n), dtype=np.float64)
        return TabularIcvf((w, h), table=table)
    if kind == "monolithic":
        nets = [read_net(spec) for spec in arch["nets"]]
        half = len(nets) // 2
        return MonolithicIcvf(
            arch["feature_dim"], hidden_dims=arch["hidden_dims"],
            layer_norm=arch["layer_norm"], activation=arch["activation"],
            n_members=arch["n_members"], members=nets[:half], targets=nets[half:],
        )
    if kind == "multilinear":
        nets = [read_net(spec) for spec in arch["nets"]]
        per_member = 3
        n_members = arch["n_members"]
        members, targets = [], []
        for group_base, out in ((0, members), (n_members * per_member, targets)):
            for m in range(n_members):
                base = group_base + m * per_member
                out.append({"phi": nets[base], "psi": nets[base + 1], "tmat": nets[base + 2]})
        return MultilinearIcvf(
            arch["feature_dim"], latent_dim=arch["latent_dim"],
            hidden_dims=arch["hidden_dims"], layer_norm=arch["layer_norm"],
            activation=arch["activation"], n_members=n_members,
            members=members, targets=targets,
        )
    raise VersionError(f"unknown head kind {kind!r} in checkpoint")
