"""Fully-connected ReLU networks with manual backprop and momentum SGD.

Weights are stored as ``(fan_in, fan_out)`` matrices so that a batch
``x`` of shape ``(B, d)`` maps to ``x @ W + b``.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError, StaleCacheError

MAGIC = b"KDRKMLP\x00"
FORMAT_VERSION = 1


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: Activation = Activation.RELU

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError(f"layer dims must be >= 1, got {self.input_dim}->{self.output_dim}")


def mlp_specs(input_dim: int, hidden: list[int] | tuple[int, ...], output_dim: int) -> list[LayerSpec]:
    """ReLU hidden layers followed by an identity output layer."""
    dims = [input_dim, *hidden, output_dim]
    specs = [LayerSpec(a, b, Activation.RELU) for a, b in zip(dims[:-2], dims[1:-1])]
    specs.append(LayerSpec(dims[-2], dims[-1], Activation.IDENTITY))
    return specs


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")


@dataclass
class Cache:
    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    version: int


class Mlp:
    """A stack of affine layers. ``version`` increments on every in-place update."""

    def __init__(self, specs: list[LayerSpec], weights: list[np.ndarray], biases: list[np.ndarray], seed: int = 0):
        _check_chain(specs)
        if len(weights) != len(specs) or len(biases) != len(specs):
            raise ConfigError("one weight matrix and bias vector per layer required")
        for spec, w, b in zip(specs, weights, biases):
            if w.shape != (spec.input_dim, spec.output_dim) or b.shape != (spec.output_dim,):
                raise ConfigError(f"parameter shapes {w.shape}, {b.shape} do not match {spec}")
        self.specs = list(specs)
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        self.seed = seed
        self.version = 0

    @property
    def input_dim(self) -> int:
        return self.specs[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.specs[-1].output_dim

    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "Mlp":
        return Mlp(self.specs, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.seed)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x) -> tuple[np.ndarray, Cache]:
        return forward(self, x)

    def predict(self, x) -> np.ndarray:
        return forward(self, x)[0]


def _check_chain(specs: list[LayerSpec]) -> None:
    if not specs:
        raise ConfigError("network needs at least one layer")
    for prev, nxt in zip(specs[:-1], specs[1:]):
        if prev.output_dim != nxt.input_dim:
            raise ConfigError(f"layer dims do not chain: {prev.output_dim} -> {nxt.input_dim}")
    if specs[-1].activation is not Activation.IDENTITY:
        raise ConfigError("final layer must be identity (raw logits)")


def init_mlp(specs: list[LayerSpec], seed: int = 0) -> Mlp:
    """He-uniform weights ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    _check_chain(specs)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for spec in specs:
        bound = np.sqrt(6.0 / spec.input_dim)
        weights.append(rng.uniform(-bound, bound, size=(spec.input_dim, spec.output_dim)))
        biases.append(np.zeros(spec.output_dim))
    return Mlp(specs, weights, biases, seed)


def forward(m: Mlp, x) -> tuple[np.ndarray, Cache]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.ndim != 2 or h.shape[1] != m.input_dim:
        raise ShapeError(f"input has shape {x.shape}, network expects {m.input_dim} features")
    inputs, pre = [], []
    for spec, w, b in zip(m.specs, m.weights, m.biases):
        inputs.append(h)
        a = h @ w + b
        pre.append(a)
        h = np.maximum(a, 0.0) if spec.activation is Activation.RELU else a
    return (h[0] if single else h), Cache(inputs, pre, m.version)


def backward(m: Mlp, cache: Cache, dL_dlogits) -> list[tuple[np.ndarray, np.ndarray]]:
    """Parameter gradients ``[(dW, db), ...]`` given the gradient at the logits.

    For a batch, ``dL_dlogits`` must already include any 1/B averaging.
    """
    if cache.version != m.version:
        raise StaleCacheError("parameters changed since this forward pass")
    g = np.atleast_2d(np.asarray(dL_dlogits, dtype=np.float64))
    if g.shape != cache.pre_activations[-1].shape:
        raise ShapeError(f"logit gradient has shape {g.shape}, expected {cache.pre_activations[-1].shape}")
    grads = [None] * len(m.specs)
    for layer in reversed(range(len(m.specs))):
        if m.specs[layer].activation is Activation.RELU:
            # subgradient 0 at the kink
            g = g * (cache.pre_activations[layer] > 0)
        grads[layer] = (cache.inputs[layer].T @ g, g.sum(axis=0))
        if layer:
            g = g @ m.weights[layer].T
    return grads


@dataclass
class SgdState:
    velocity: list[np.ndarray] = field(default_factory=list)


def sgd_step(m: Mlp, grads, cfg: SgdConfig, state: SgdState | None = None) -> SgdState:
    """In-place momentum SGD with L2 weight decay (biases are decayed too).

    ``v = momentum * v + (g + weight_decay * p)``; ``p -= lr * v``.
    """
    params = m.parameters()
    flat = [g for pair in grads for g in pair]
    if len(flat) != len(params) or any(g.shape != p.shape for g, p in zip(flat, params)):
        raise ShapeError("gradient shapes do not match parameters")
    if state is None:
        state = SgdState()
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, flat, state.velocity):
        d = g + cfg.weight_decay * p if cfg.weight_decay else g
        v *= cfg.momentum
        v += d
        p -= cfg.learning_rate * v
    m.version += 1
    return state


# --- checkpoint container -------------------------------------------------
#
# magic (8 bytes) | version u32 LE | header length u32 LE | JSON header |
# float64 LE arrays, row-major, in layer order W0 b0 W1 b1 ...


def save_checkpoint(m: Mlp, path) -> None:
    header = json.dumps(
        {
            "layers": [[s.input_dim, s.output_dim, s.activation.value] for s in m.specs],
            "seed": m.seed,
        },
        sort_keys=True,
    ).encode()
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    for p in m.parameters():
        chunks.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> Mlp:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a network checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(data[16 : 16 + hlen])
        specs = [LayerSpec(a, b, Activation(act)) for a, b, act in header["layers"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    offset = 16 + hlen
    weights, biases = [], []
    for spec in specs:
        for shape, dest in (((spec.input_dim, spec.output_dim), weights), ((spec.output_dim,), biases)):
            n = int(np.prod(shape))
            end = offset + 8 * n
            if end > len(data):
                raise CheckpointError(f"{path}: truncated parameter data")
            dest.append(np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).astype(np.float64))
            offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after parameters")
    try:
        return Mlp(specs, weights, biases, int(header.get("seed", 0)))
    except ConfigError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
