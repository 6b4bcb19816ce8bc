"""Dense binary classifier over a flat parameter vector.

A parameter vector holds every layer's weights (row-major, ``fan_out x
fan_in``) followed by its biases, layers in order, the single-logit output
layer last. Losses are built on an autodiff :class:`~pmfl.autodiff.Tape`;
plain probabilities are computed directly with numpy.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Node, Tape
from .errors import ConfigError

ACTIVATIONS = ("tanh", "relu", "sigmoid")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_layers: tuple[int, ...] = (16,)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if int(self.input_dim) < 1:
            raise ConfigError("input_dim must be positive")
        if any(h < 1 for h in self.hidden_layers):
            raise ConfigError("hidden layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer, output layer included."""
        widths = [int(self.input_dim), *self.hidden_layers, 1]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum((fi + 1) * fo for fi, fo in self.layer_dims)

    def to_dict(self) -> dict:
        return {
            "input_dim": int(self.input_dim),
            "hidden_layers": list(self.hidden_layers),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(int(d["input_dim"]), tuple(d.get("hidden_layers", (16,))), d.get("activation", "tanh"))


@dataclass(frozen=True)
class LayerSlice:
    weights: slice
    bias: slice
    fan_in: int
    fan_out: int


def layer_slices(spec: ModelSpec) -> list[LayerSlice]:
    out, pos = [], 0
    for fi, fo in spec.layer_dims:
        w = slice(pos, pos + fi * fo)
        pos += fi * fo
        b = slice(pos, pos + fo)
        pos += fo
        out.append(LayerSlice(w, b, fi, fo))
    return out


def unflatten(spec: ModelSpec, params) -> list[tuple[np.ndarray, np.ndarray]]:
    params = _check_params(spec, params)
    return [
        (params[ls.weights].reshape(ls.fan_out, ls.fan_in), params[ls.bias])
        for ls in layer_slices(spec)
    ]


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in layers]).astype(np.float64)


def _check_params(spec: ModelSpec, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ConfigError(f"parameter vector has length {params.size}, model needs {spec.n_params}")
    return params


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    layers = []
    for fi, fo in spec.layer_dims:
        s = math.sqrt(6.0 / (fi + fo))
        layers.append((rng.uniform(-s, s, size=(fo, fi)), np.zeros(fo)))
    return flatten(layers)


# -- partition masks ----------------------------------------------------------


@dataclass(frozen=True)
class PartitionMask:
    """Shared (synchronised, meta-updated) vs local (frozen on the server) parameters."""

    shared: np.ndarray
    fraction: float = 0.5
    mode: str = "units"

    def __post_init__(self):
        arr = np.asarray(self.shared, dtype=bool).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "shared", arr)

    @property
    def local(self) -> np.ndarray:
        return ~self.shared

    def __len__(self) -> int:
        return self.shared.shape[0]

    @classmethod
    def all_shared(cls, n: int) -> "PartitionMask":
        return cls(np.ones(n, dtype=bool), 1.0, "flat")

    @classmethod
    def all_local(cls, n: int) -> "PartitionMask":
        return cls(np.zeros(n, dtype=bool), 0.0, "flat")

    def to_bytes(self) -> bytes:
        return struct.pack("<I", len(self)) + np.packbits(self.shared, bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, fraction: float = 0.5, mode: str = "units") -> "PartitionMask":
        (n,) = struct.unpack_from("<I", data, 0)
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=4), bitorder="little")
        return cls(bits[:n].astype(bool), fraction, mode)


def partition_mask(spec: ModelSpec, fraction: float = 0.5, mode: str = "units") -> PartitionMask:
    """Mask sharing the first ``ceil(fraction * H)`` units of every hidden layer.

    A shared unit contributes its incoming weights and bias; the output
    layer shares the weights reading from shared units plus its bias.
    ``mode="flat"`` instead shares the first ``ceil(fraction * N)`` entries.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("mask fraction must lie in (0, 1]")
    n = spec.n_params
    shared = np.zeros(n, dtype=bool)
    if mode == "flat":
        shared[: math.ceil(fraction * n)] = True
        return PartitionMask(shared, fraction, mode)
    if mode != "units":
        raise ConfigError(f"unknown mask mode {mode!r}")
    slices = layer_slices(spec)
    prev_shared = None
    for ls in slices[:-1]:
        k = math.ceil(fraction * ls.fan_out)
        w = np.zeros((ls.fan_out, ls.fan_in), dtype=bool)
        w[:k, :] = True
        shared[ls.weights] = w.ravel()
        b = np.zeros(ls.fan_out, dtype=bool)
        b[:k] = True
        shared[ls.bias] = b
        prev_shared = k
    out = slices[-1]
    w = np.zeros((out.fan_out, out.fan_in), dtype=bool)
    w[:, : prev_shared if prev_shared is not None else out.fan_in] = True
    shared[out.weights] = w.ravel()
    shared[out.bias] = True
    return PartitionMask(shared, fraction, mode)


def apply_masked_update(params, gradient, rate: float, mask: PartitionMask) -> np.ndarray:
    """``params - rate * gradient`` on shared entries; local entries copied unchanged."""
    params = np.asarray(params, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if params.shape != gradient.shape or params.shape[0] != len(mask):
        raise ConfigError("parameter, gradient and mask lengths differ")
    out = params.copy()
    s = mask.shared
    out[s] = params[s] - rate * gradient[s]
    return out


# -- losses and prediction ------------------------------------------------------


def _check_batch(spec: ModelSpec, features, labels=None):
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ConfigError(f"features have shape {np.shape(features)}, model expects dim {spec.input_dim}")
    if labels is None:
        return X
    y = np.asarray(labels, dtype=np.float64).ravel()
    if y.shape[0] != X.shape[0]:
        raise ConfigError("features and labels differ in length")
    if X.shape[0] == 0:
        raise ConfigError("empty batch")
    return X, y


def emit_logits(tape: Tape, spec: ModelSpec, param_ids, features) -> np.ndarray:
    """Emit the network on ``tape``; returns the logit node id per row."""
    X = _check_batch(spec, features)
    param_ids = np.asarray(param_ids, dtype=np.int64)
    if param_ids.shape != (spec.n_params,):
        raise ConfigError("parameter node count does not match the model")
    one = tape.push(0, (), 1.0)
    h = tape.add_consts(X)
    slices = layer_slices(spec)
    for i, ls in enumerate(slices):
        act = spec.activation if i < len(slices) - 1 else None
        w = param_ids[ls.weights].reshape(ls.fan_out, ls.fan_in)
        h = tape.dense(h, w, param_ids[ls.bias], one, act)
    return h[:, 0]


def emit_loss(tape: Tape, spec: ModelSpec, param_ids, features, labels) -> int:
    X, y = _check_batch(spec, features, labels)
    logits = emit_logits(tape, spec, param_ids, X)
    one = tape.push(0, (), 1.0)
    return tape.bce(logits, y, one)


def forward_loss(spec: ModelSpec, params, features, labels, tape: Tape | None = None) -> Node:
    """Mean binary cross-entropy of the batch as a differentiable tape node.

    ``params`` is either a parameter vector (fresh leaves are created) or
    node ids already on ``tape``.
    """
    arr = np.asarray(params)
    if tape is None or arr.dtype.kind == "f":
        _check_params(spec, arr)
        tape = tape or Tape(capacity=_capacity_hint(spec, len(np.atleast_2d(features))))
        ids = tape.add_leaves(arr)
    else:
        ids = np.asarray([int(p) for p in params], dtype=np.int64)
    return tape.node(emit_loss(tape, spec, ids, features, labels))


def _capacity_hint(spec: ModelSpec, rows: int) -> int:
    return spec.n_params + rows * (spec.input_dim + 2 * sum(spec.hidden_layers) + 8) + 16


def loss_and_grad(spec: ModelSpec, params, features, labels) -> tuple[float, np.ndarray]:
    """Loss value and its gradient w.r.t. every parameter."""
    loss = forward_loss(spec, params, features, labels)
    return loss.value, loss.tape.backward(loss.index)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return _sigmoid(z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logits(spec: ModelSpec, params, features) -> np.ndarray:
    X = _check_batch(spec, features)
    layers = unflatten(spec, params)
    h = X
    for i, (w, b) in enumerate(layers):
        h = h @ w.T + b
        if i < len(layers) - 1:
            h = _act(spec.activation, h)
    return h[:, 0]


def predict_proba(spec: ModelSpec, params, features):
    """Sigmoid of the output logit; a float for one row, an array for a matrix."""
    p = _sigmoid(logits(spec, params, features))
    if np.ndim(features) == 1:
        return float(p[0])
    return p


def mean_bce(spec: ModelSpec, params, features, labels) -> float:
    """Straight numpy evaluation of the loss that :func:`forward_loss` builds."""
    X, y = _check_batch(spec, features, labels)
    p = np.clip(predict_proba(spec, params, X), 1e-12, 1.0 - 1e-12)
    return float(-np.mean(np.where(y > 0.5, np.log(p), np.log(1.0 - p))))


# -- serialisation --------------------------------------------------------------


def params_to_bytes(params) -> bytes:
    """32-bit little-endian length, then little-endian float64 values."""
    arr = np.asarray(params, dtype="<f8").ravel()
    return struct.pack("<I", arr.shape[0]) + arr.tobytes()


def params_from_bytes(data: bytes) -> np.ndarray:
    (n,) = struct.unpack_from("<I", data, 0)
    if len(data) != 4 + 8 * n:
        raise ConfigError(f"parameter blob holds {len(data) - 4} bytes, header says {8 * n}")
    return np.frombuffer(data, dtype="<f8", offset=4, count=n).astype(np.float64)


def save_params(path, params) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> np.ndarray:
    return params_from_bytes(Path(path).read_bytes())
