"""Dense tanh network with manual backprop, a Gaussian policy head and Adam.

A trunk of tanh layers feeds a linear action-mean head.  The scalar value
head either shares that trunk or sits on its own trunk of the same shape
(``shared=False``).  The policy's log standard deviation is a free parameter
vector, independent of the input.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_STD_INIT = -0.5
CHECKPOINT_VERSION = 1
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
HALF_LOG_2PI_E = 0.5 * math.log(2.0 * math.pi * math.e)


class ShapeError(ValueError):
    pass


@dataclass
class MlpParams:
    """Named parameter arrays.

    Trunk layers are ``W0, b0, ..., W{k-1}, b{k-1}``; heads are ``Wpi, bpi``
    (action mean) and ``Wv, bv`` (value).  A separate value trunk, when
    present, uses ``U0, c0, ...``.  Weights are stored ``(fan_in,
    fan_out)`` so a layer computes ``x @ W + b``.
    """

    arrays: dict[str, np.ndarray]
    sizes: tuple[int, ...]
    act_dim: int

    @property
    def obs_dim(self) -> int:
        return self.sizes[0]

    @property
    def n_hidden(self) -> int:
        return len(self.sizes) - 1

    @property
    def shared(self) -> bool:
        return "U0" not in self.arrays

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> MlpParams:
        return MlpParams({k: v.copy() for k, v in self.arrays.items()}, self.sizes, self.act_dim)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for v in self.arrays.values():
            v[...] = vec[i:i + v.size].reshape(v.shape)
            i += v.size

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: MlpParams) -> AdamState:
        return cls(params.zeros_like(), params.zeros_like(), 0)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    activations: list[np.ndarray] = field(default_factory=list)
    value_activations: list[np.ndarray] = field(default_factory=list)
    single: bool = False


def _orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    # Entry scale 1/sqrt(fan_in) regardless of which side is orthonormal.
    return q * math.sqrt(max(1.0, fan_out / fan_in))


def init(seed: int, obs_dim: int = 11, hidden: tuple[int, ...] = (128, 128, 128, 128),
         act_dim: int = 2, policy_gain: float = 0.01, shared: bool = True) -> MlpParams:
    rng = np.random.default_rng(seed)
    sizes = (obs_dim, *hidden)
    arrays: dict[str, np.ndarray] = {}
    for i in range(len(hidden)):
        arrays[f"W{i}"] = _orthogonal(rng, sizes[i], sizes[i + 1])
        arrays[f"b{i}"] = np.zeros(sizes[i + 1])
    if not shared:
        for i in range(len(hidden)):
            arrays[f"U{i}"] = _orthogonal(rng, sizes[i], sizes[i + 1])
            arrays[f"c{i}"] = np.zeros(sizes[i + 1])
    arrays["Wpi"] = _orthogonal(rng, sizes[-1], act_dim) * policy_gain
    arrays["bpi"] = np.zeros(act_dim)
    arrays["Wv"] = _orthogonal(rng, sizes[-1], 1)
    arrays["bv"] = np.zeros(1)
    arrays["log_std"] = np.full(act_dim, LOG_STD_INIT)
    return MlpParams(arrays, sizes, act_dim)


def forward(params: MlpParams, obs: np.ndarray):
    """Return ``(action_mean, value, cache)``.

    A 1-D input gives a ``(act_dim,)`` mean and a float value; a 2-D batch
    gives ``(n, act_dim)`` and ``(n,)``.
    """
    x = np.asarray(obs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.obs_dim:
        raise ShapeError(f"expected input of width {params.obs_dim}, got shape {np.shape(obs)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    cache = ForwardCache(x, [], [], single)
    a = params.arrays
    h = x
    for i in range(params.n_hidden):
        h = np.tanh(h @ a[f"W{i}"] + a[f"b{i}"])
        cache.activations.append(h)
    mean = h @ a["Wpi"] + a["bpi"]
    if not params.shared:
        h = x
        for i in range(params.n_hidden):
            h = np.tanh(h @ a[f"U{i}"] + a[f"c{i}"])
            cache.value_activations.append(h)
    value = (h @ a["Wv"] + a["bv"])[:, 0]
    if single:
        return mean[0], float(value[0]), cache
    return mean, value, cache


def backward(params: MlpParams, cache: ForwardCache, d_mean: np.ndarray,
             d_value: np.ndarray, d_log_std: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradients w.r.t. the outputs."""
    d_mean = np.asarray(d_mean, dtype=np.float64)
    d_value = np.asarray(d_value, dtype=np.float64)
    if cache.single:
        d_mean = d_mean.reshape(1, -1)
        d_value = d_value.reshape(1)
    n = cache.inputs.shape[0]
    if d_mean.shape != (n, params.act_dim) or d_value.shape != (n,):
        raise ShapeError("output gradients do not match the cached forward pass")
    if len(cache.activations) != params.n_hidden:
        raise ShapeError("cache was produced by a different network")
    a = params.arrays
    grads: dict[str, np.ndarray] = {}
    h = cache.activations[-1]
    grads["Wpi"] = h.T @ d_mean
    grads["bpi"] = d_mean.sum(axis=0)
    dh = d_mean @ a["Wpi"].T
    if params.shared:
        grads["Wv"] = h.T @ d_value[:, None]
        dh = dh + d_value[:, None] @ a["Wv"].T
    else:
        if len(cache.value_activations) != params.n_hidden:
            raise ShapeError("cache was produced by a different network")
        hv = cache.value_activations[-1]
        grads["Wv"] = hv.T @ d_value[:, None]
        _backprop_trunk(a, cache.inputs, cache.value_activations,
                        d_value[:, None] @ a["Wv"].T, "U", "c", grads)
    grads["bv"] = np.array([d_value.sum()])
    _backprop_trunk(a, cache.inputs, cache.activations, dh, "W", "b", grads)
    grads["log_std"] = (np.zeros(params.act_dim) if d_log_std is None
                        else np.asarray(d_log_std, dtype=np.float64).copy())
    return {k: grads[k] for k in a}


def _backprop_trunk(a, inputs, activations, dh, wname, bname, grads):
    for i in range(len(activations) - 1, -1, -1):
        h = activations[i]
        dz = dh * (1.0 - h * h)
        below = activations[i - 1] if i > 0 else inputs
        grads[f"{wname}{i}"] = below.T @ dz
        grads[f"{bname}{i}"] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ a[f"{wname}{i}"].T


def adam_step(params: MlpParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[MlpParams, AdamState]:
    """Bias-corrected Adam update, applied in place; log-std is clamped afterwards."""
    if set(grads) != set(params.arrays):
        raise ShapeError("gradient names do not match parameters")
    for k, g in grads.items():
        if g.shape != params.arrays[k].shape:
            raise ShapeError(f"gradient {k} has shape {g.shape}, expected {params.arrays[k].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.arrays[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    np.clip(params.arrays["log_std"], LOG_STD_MIN, LOG_STD_MAX, out=params.arrays["log_std"])
    if not params.all_finite():
        raise FloatingPointError("parameters became non-finite")
    return params, state


def gaussian_head(action_mean, log_std, action):
    """Diagonal Gaussian ``(log_prob, entropy)``; batched over leading axes."""
    mean = np.asarray(action_mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    act = np.asarray(action, dtype=np.float64)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_std))
            and np.all(np.isfinite(act))):
        raise ValueError("non-finite input to gaussian_head")
    z = (act - mean) * np.exp(-log_std)
    log_prob = np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)
    entropy = float(np.sum(log_std + HALF_LOG_2PI_E))
    return log_prob, entropy


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def save_checkpoint(params: MlpParams, path: str | Path, meta: dict | None = None) -> None:
    header = {"schema_version": CHECKPOINT_VERSION, "sizes": list(params.sizes),
              "act_dim": params.act_dim,
              "shapes": {k: list(v.shape) for k, v in params.arrays.items()},
              "meta": meta or {}}
    buf = io.BytesIO()
    np.savez(buf, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), np.uint8),
             **params.arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[MlpParams, dict]:
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("schema_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version in {path}")
        arrays = {k: np.array(data[k]) for k in header["shapes"]}
    for k, shape in header["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise ShapeError(f"checkpoint array {k} has wrong shape")
    return MlpParams(arrays, tuple(header["sizes"]), header["act_dim"]), header["meta"]
