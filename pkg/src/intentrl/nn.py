"""Minimal dense-network engine on numpy.

Feed-forward stacks of affine layers with optional per-layer LayerNorm
(applied before the activation), exact reverse-mode gradients, bias-corrected
Adam, and Polyak target updates. Parameters are float32 by default; gradient
verification against finite differences runs on float64 copies via astype().
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericError, ShapeError, VersionError

CHECKPOINT_VERSION = 1

# Below this variance a LayerNorm row normalizes to exactly zero instead of
# dividing by a vanishing sigma.
LN_VAR_FLOOR = 1e-8

_GELU_C = np.sqrt(2.0 / np.pi)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "gelu":
        inner = _GELU_C * (z + 0.044715 * z**3)
        return 0.5 * z * (1.0 + np.tanh(inner))
    if name == "identity":
        return z
    raise ShapeError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        # Subgradient 0 at the kink.
        return (z > 0.0).astype(z.dtype)
    if name == "gelu":
        inner = _GELU_C * (z + 0.044715 * z**3)
        t = np.tanh(inner)
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z**2)
        return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t**2) * dinner
    if name == "identity":
        return np.ones_like(z)
    raise ShapeError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    activation: str = "identity"
    layer_norm: bool = False
    ln_scale: np.ndarray | None = None
    ln_shift: np.ndarray | None = None


@dataclass
class DenseNet:
    layers: list

    @property
    def input_dim(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].w.shape[1]

    def parameters(self) -> list:
        """Flat parameter list in a stable order (w, b, [ln_scale, ln_shift] per layer)."""
        params = []
        for layer in self.layers:
            params.append(layer.w)
            params.append(layer.b)
            if layer.layer_norm:
                params.append(layer.ln_scale)
                params.append(layer.ln_shift)
        return params

    def set_parameters(self, params: list) -> None:
        own = self.parameters()
        if len(own) != len(params):
            raise ShapeError(f"expected {len(own)} parameter arrays, got {len(params)}")
        for dst, src in zip(own, params):
            if dst.shape != src.shape:
                raise ShapeError(f"parameter shape {src.shape} != {dst.shape}")
            dst[...] = src

    def copy(self) -> "DenseNet":
        return DenseNet([
            DenseLayer(
                w=layer.w.copy(),
                b=layer.b.copy(),
                activation=layer.activation,
                layer_norm=layer.layer_norm,
                ln_scale=None if layer.ln_scale is None else layer.ln_scale.copy(),
                ln_shift=None if layer.ln_shift is None else layer.ln_shift.copy(),
            )
            for layer in self.layers
        ])

    def astype(self, dtype) -> "DenseNet":
        out = self.copy()
        for layer in out.layers:
            layer.w = layer.w.astype(dtype)
            layer.b = layer.b.astype(dtype)
            if layer.layer_norm:
                layer.ln_scale = layer.ln_scale.astype(dtype)
                layer.ln_shift = layer.ln_shift.astype(dtype)
        return out

    def arch(self) -> dict:
        return {
            "layers": [
                {
                    "fan_in": int(l.w.shape[0]),
                    "fan_out": int(l.w.shape[1]),
                    "activation": l.activation,
                    "layer_norm": bool(l.layer_norm),
                }
                for l in self.layers
            ]
        }


def init_dense_net(dims, activation: str = "relu", layer_norm: bool = False,
                   seed: int = 0, dtype=np.float32) -> DenseNet:
    """Hidden layers use `activation` (+ optional LayerNorm); the last is linear.

    Weights are fan-in scaled uniform, biases zero.
    """
    if len(dims) < 2:
        raise ShapeError("need at least input and output dims")
    rng = np.random.default_rng(seed)
    layers = []
    n_layers = len(dims) - 1
    for i in range(n_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        lim = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)
        b = np.zeros(fan_out, dtype=dtype)
        last = i == n_layers - 1
        use_ln = layer_norm and not last
        layers.append(DenseLayer(
            w=w,
            b=b,
            activation="identity" if last else activation,
            layer_norm=use_ln,
            ln_scale=np.ones(fan_out, dtype=dtype) if use_ln else None,
            ln_shift=np.zeros(fan_out, dtype=dtype) if use_ln else None,
        ))
    return DenseNet(layers)


def _check_input(net: DenseNet, x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x, dtype=net.layers[0].w.dtype)
    squeezed = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != net.input_dim:
        raise ShapeError(f"input dim {arr.shape[1]} != network input dim {net.input_dim}")
    return arr, squeezed


def _ln_forward(z: np.ndarray, scale: np.ndarray, shift: np.ndarray):
    mu = z.mean(axis=1, keepdims=True)
    centered = z - mu
    var = (centered**2).mean(axis=1, keepdims=True)
    active = var >= LN_VAR_FLOOR
    inv_sigma = np.where(active, 1.0 / np.sqrt(np.where(active, var, 1.0)), 0.0)
    zhat = centered * inv_sigma
    return zhat * scale + shift, (zhat, inv_sigma)


def forward(net: DenseNet, x) -> np.ndarray:
    """Pure forward pass; accepts a single vector or an (N, input_dim) batch."""
    y, _ = forward_cached(net, x)
    return y


def forward_cached(net: DenseNet, x):
    arr, squeezed = _check_input(net, x)
    cache = {"x": arr, "pre": [], "ln": [], "post_ln": []}
    h = arr
    for layer in net.layers:
        z = h @ layer.w + layer.b
        cache["pre"].append(z)
        if layer.layer_norm:
            z, ln_cache = _ln_forward(z, layer.ln_scale, layer.ln_shift)
            cache["ln"].append(ln_cache)
        else:
            cache["ln"].append(None)
        cache["post_ln"].append(z)
        h = _act(layer.activation, z)
        cache.setdefault("act_out", []).append(h)
    y = h[0] if squeezed else h
    cache["squeezed"] = squeezed
    return y, cache


def backward(net: DenseNet, cache, grad_y) -> tuple:
    """Reverse pass; returns (grads aligned with net.parameters(), grad wrt input)."""
    g = np.atleast_2d(np.asarray(grad_y, dtype=net.layers[0].w.dtype))
    grads = []
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        z_post = cache["post_ln"][i]
        g = g * _act_grad(layer.activation, z_post)
        layer_grads = []
        if layer.layer_norm:
            zhat, inv_sigma = cache["ln"][i]
            d_scale = (g * zhat).sum(axis=0)
            d_shift = g.sum(axis=0)
            gz = g * layer.ln_scale
            n = zhat.shape[1]
            mean_gz = gz.mean(axis=1, keepdims=True)
            mean_gz_zhat = (gz * zhat).mean(axis=1, keepdims=True)
            g = inv_sigma * (gz - mean_gz - zhat * mean_gz_zhat)
            layer_grads = [d_scale, d_shift]
        h_in = cache["x"] if i == 0 else cache["act_out"][i - 1]
        d_w = h_in.T @ g
        d_b = g.sum(axis=0)
        g = g @ layer.w.T
        grads = [d_w, d_b, *layer_grads] + grads
    return grads, g


def gradient(net: DenseNet, loss, x) -> list:
    """Exact reverse-mode gradients of a scalar loss over the batch outputs.

    `loss` must expose value(y) -> float and grad(y) -> dL/dy.
    """
    y, cache = forward_cached(net, x)
    y2d = np.atleast_2d(y)
    value = float(loss.value(y2d))
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    grads, _ = backward(net, cache, loss.grad(y2d))
    return grads


class SquaredError:
    """Sum of squared residuals against fixed targets."""

    def __init__(self, targets: np.ndarray):
        self.targets = np.atleast_2d(np.asarray(targets))

    def value(self, y: np.ndarray) -> float:
        return float(((y - self.targets) ** 2).sum())

    def grad(self, y: np.ndarray) -> np.ndarray:
        return 2.0 * (y - self.targets)


class WeightedSquaredError:
    """Mean over the batch of weight * (y[:, 0] - target)^2."""

    def __init__(self, targets: np.ndarray, weights: np.ndarray):
        self.targets = np.asarray(targets).reshape(-1)
        self.weights = np.asarray(weights).reshape(-1)

    def value(self, y: np.ndarray) -> float:
        diff = y[:, 0] - self.targets
        return float(np.mean(self.weights * diff**2))

    def grad(self, y: np.ndarray) -> np.ndarray:
        g = np.zeros_like(y)
        diff = y[:, 0] - self.targets
        g[:, 0] = 2.0 * self.weights * diff / len(diff)
        return g


def finite_difference_grads(net: DenseNet, loss, x, h: float = 1e-4) -> list:
    """Central-difference oracle; run on a float64 net for tight comparisons."""
    grads = []
    for p in net.parameters():
        g = np.zeros_like(p, dtype=np.float64)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            up = loss.value(np.atleast_2d(forward(net, x)))
            p[idx] = orig - h
            down = loss.value(np.atleast_2d(forward(net, x)))
            p[idx] = orig
            g[idx] = (up - down) / (2.0 * h)
            it.iternext()
        grads.append(g)
    return grads


@dataclass
class AdamState:
    m: list
    v: list
    step: int
    learning_rate: float
    epsilon: float
    beta1: float = 0.9
    beta2: float = 0.999


def init_adam(params: list, learning_rate: float, epsilon: float = 1e-8,
              betas: tuple = (0.9, 0.999)) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p, dtype=np.float64) for p in params],
        v=[np.zeros_like(p, dtype=np.float64) for p in params],
        step=0,
        learning_rate=learning_rate,
        epsilon=epsilon,
        beta1=betas[0],
        beta2=betas[1],
    )


def adam_step(state: AdamState, params: list, grads: list):
    """Standard bias-corrected Adam update, in place on params and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params/grads/state length mismatch")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        step = state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
        p -= step.astype(p.dtype)
    return params, state


def polyak_update(target_params: list, online_params: list, tau: float):
    """target <- (1 - tau) * target + tau * online, elementwise in place."""
    if len(target_params) != len(online_params):
        raise ShapeError("parameter list length mismatch")
    for t, o in zip(target_params, online_params):
        if t.shape != o.shape:
            raise ShapeError(f"shape {o.shape} != {t.shape}")
        t *= 1.0 - tau
        t += tau * o
    return target_params


def save_checkpoint(net: DenseNet, path, config: dict | None = None,
                    extra_arch: dict | None = None) -> None:
    """Versioned binary: u32 version, u32 JSON length, arch JSON, f32 LE blob.

    A sidecar <path>.json holds the training config when one is given.
    """
    path = Path(path)
    arch = net.arch()
    if extra_arch:
        arch.update(extra_arch)
    header = json.dumps(arch, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.parameters())
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(blob)
    if config is not None:
        Path(str(path) + ".json").write_text(json.dumps(config, sort_keys=True, indent=2))


def load_checkpoint(path) -> tuple:
    """Returns (net, arch dict, sidecar config dict or None)."""
    path = Path(path)
    raw = path.read_bytes()
    version, hlen = struct.unpack_from("<II", raw, 0)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    arch = json.loads(raw[8:8 + hlen].decode("utf-8"))
    blob = np.frombuffer(raw[8 + hlen:], dtype="<f4")
    layers = []
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape))
        arr = blob[offset:offset + n].reshape(shape).astype(np.float32)
        offset += n
        return arr

    for spec in arch["layers"]:
        fan_in, fan_out = spec["fan_in"], spec["fan_out"]
        w = take((fan_in, fan_out))
        b = take((fan_out,))
        ln = spec["layer_norm"]
        layers.append(DenseLayer(
            w=w, b=b, activation=spec["activation"], layer_norm=ln,
            ln_scale=take((fan_out,)) if ln else None,
            ln_shift=take((fan_out,)) if ln else None,
        ))
    if offset != blob.size:
        raise VersionError(f"checkpoint blob has {blob.size} floats, consumed {offset}")
    sidecar = Path(str(path) + ".json")
    config = json.loads(sidecar.read_text()) if sidecar.exists() else None
    return DenseNet(layers), arch, config
