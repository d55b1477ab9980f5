"""Minimal dense-network engine.

Deterministic initialization, forward pass, exact reverse-mode gradients and
SGD-with-momentum updates, all on flat float64 parameter vectors. A model is
just (MlpSpec, params); there is no layer object graph to keep in sync.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "tanh")

CHECKPOINT_MAGIC = b"FGKD"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """An operation received or produced NaN/Inf values."""


@dataclass(frozen=True)
class MlpSpec:
    """Network architecture: complete layer widths (input, hidden..., output) and activation."""

    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("layer_widths needs at least an input and an output entry")
        if any(w < 1 for w in widths):
            raise ValueError(f"all layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def param_dim(self) -> int:
        return sum(nin * nout + nout for nin, nout in self.layer_pairs())

    def layer_pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_widths[:-1], self.layer_widths[1:]))

    def layer_slices(self) -> list[tuple[slice, slice, tuple[int, int]]]:
        """Per layer: (weight slice, bias slice, (n_in, n_out)) into the flat vector."""
        out = []
        offset = 0
        for nin, nout in self.layer_pairs():
            w = slice(offset, offset + nin * nout)
            offset += nin * nout
            b = slice(offset, offset + nout)
            offset += nout
            out.append((w, b, (nin, nout)))
        return out


@dataclass(frozen=True)
class SgdHyper:
    """SGD hyperparameters. Defaults match the reference training setup."""

    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class ForwardCache:
    """Batch intermediates kept for backprop: inputs, per-layer pre-activations and activations."""

    x: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]  # hidden layers only, length num_layers - 1

    @property
    def logits(self) -> np.ndarray:
        return self.pre_activations[-1]


def check_params(params: np.ndarray, spec: MlpSpec) -> np.ndarray:
    """Validate a flat parameter vector against a spec; returns it as float64."""
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.param_dim:
        raise ValueError(
            f"parameter vector has shape {params.shape}, expected ({spec.param_dim},) for widths {spec.layer_widths}"
        )
    if not np.all(np.isfinite(params)):
        raise NonFiniteError("parameter vector contains NaN/Inf")
    return params


def unpack_params(params: np.ndarray, spec: MlpSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Reshape the flat vector into per-layer (W, b) views (no copies)."""
    layers = []
    for wsl, bsl, (nin, nout) in spec.layer_slices():
        layers.append((params[wsl].reshape(nin, nout), params[bsl]))
    return layers


def init_params(spec: MlpSpec, seed: int) -> np.ndarray:
    """Deterministic init: weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.param_dim, dtype=np.float64)
    for wsl, _bsl, (nin, nout) in spec.layer_slices():
        limit = np.sqrt(6.0 / (nin + nout))
        params[wsl] = rng.uniform(-limit, limit, size=nin * nout)
    return params


def forward(params: np.ndarray, spec: MlpSpec, batch_x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a batch; returns (logits, cache for backprop)."""
    params = check_params(params, spec)
    x = np.asarray(batch_x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch has shape {x.shape}, expected (batch, {spec.input_dim}) for widths {spec.layer_widths}"
        )
    layers = unpack_params(params, spec)
    pre_activations: list[np.ndarray] = []
    activations: list[np.ndarray] = []
    a = x
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        pre_activations.append(z)
        if i < len(layers) - 1:
            a = np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)
            activations.append(a)
    return pre_activations[-1], ForwardCache(x=x, pre_activations=pre_activations, activations=activations)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis (max-subtraction). Rejects non-finite input."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("softmax input contains NaN/Inf")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def backprop(cache: ForwardCache, params: np.ndarray, spec: MlpSpec, dloss_dlogits: np.ndarray) -> np.ndarray:
    """Exact reverse-mode gradient of the scalar loss whose logit-gradient is supplied.

    Returns a flat gradient of the same dimension as params.
    """
    params = check_params(params, spec)
    delta = np.asarray(dloss_dlogits, dtype=np.float64)
    if delta.shape != cache.logits.shape:
        raise ValueError(f"dloss_dlogits has shape {delta.shape}, expected {cache.logits.shape}")
    layers = unpack_params(params, spec)
    grad = np.zeros_like(params)
    slices = spec.layer_slices()
    for i in range(len(layers) - 1, -1, -1):
        a_prev = cache.activations[i - 1] if i > 0 else cache.x
        wsl, bsl, (nin, nout) = slices[i]
        grad[wsl] = (a_prev.T @ delta).reshape(nin * nout)
        grad[bsl] = delta.sum(axis=0)
        if i > 0:
            upstream = delta @ layers[i][0].T
            if spec.activation == "relu":
                delta = upstream * (cache.pre_activations[i - 1] > 0)
            else:
                a = cache.activations[i - 1]
                delta = upstream * (1.0 - a * a)
    return grad


def sgd_step(
    params: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray | None,
    hyper: SgdHyper,
) -> tuple[np.ndarray, np.ndarray]:
    """One SGD-with-momentum update; pure (inputs untouched, new arrays returned).

    v' = momentum * v + (grad + weight_decay * params); params' = params - lr * v'.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ValueError(f"grad shape {grad.shape} does not match params shape {params.shape}")
    if velocity is None:
        velocity = np.zeros_like(params)
    elif velocity.shape != params.shape:
        raise ValueError(f"velocity shape {velocity.shape} does not match params shape {params.shape}")
    if hyper.weight_decay != 0.0:
        update = grad + hyper.weight_decay * params
    else:
        update = grad
    new_velocity = hyper.momentum * velocity + update
    new_params = params - hyper.learning_rate * new_velocity
    return new_params, new_velocity


def save_checkpoint(path, spec: MlpSpec, params: np.ndarray) -> None:
    """Write a checkpoint: magic, u16 version, u16 layer count, u32 widths, f32 params.

    All integers and floats little-endian; parameters are stored single precision.
    """
    params = check_params(params, spec)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<H", len(spec.layer_widths)))
        f.write(struct.pack(f"<{len(spec.layer_widths)}I", *spec.layer_widths))
        f.write(params.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[tuple[int, ...], np.ndarray]:
    """Read a checkpoint; returns (layer widths, float64 params exact at f32 precision)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (n_widths,) = struct.unpack_from("<H", blob, 6)
    widths = struct.unpack_from(f"<{n_widths}I", blob, 8)
    offset = 8 + 4 * n_widths
    dim = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    expected = offset + 4 * dim
    if len(blob) != expected:
        raise ValueError(f"checkpoint has {len(blob)} bytes, expected {expected} for widths {widths}")
    params = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).astype(np.float64)
    return tuple(int(w) for w in widths), params
