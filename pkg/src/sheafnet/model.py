"""Network specification, output activations and the plain forward pass.

Everything downstream (sheaf construction, diffusion, training) consumes the
``NetworkSpec`` defined here. All arithmetic is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("identity", "sigmoid", "tanh", "softmax")


class SheafError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(SheafError):
    """Shapes inconsistent with the declared architecture."""


class InvalidInputError(SheafError):
    """Non-finite or otherwise invalid numeric input."""


class ConstructionError(SheafError):
    """A NetworkSpec or sheaf could not be built from the given data."""


class UnsupportedStructureError(SheafError):
    """Operation not defined for this sheaf structure (e.g. pinned coboundary)."""


class ConfigError(SheafError):
    """Invalid configuration value."""


class DivergenceError(SheafError):
    """State blew up during integration."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"divergence detected at step {step}")


def _as_f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


@dataclass
class NetworkSpec:
    """A feedforward ReLU network: dims [n0, n1, ..., n_{k+1}], k >= 1 hidden layers.

    weights[l] has shape (n_{l+1}, n_l) and biases[l] length n_{l+1}, for
    l = 0..k (layer l+1 in 1-based layer counting).
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_activation: str = "identity"

    def __post_init__(self):
        dims = [int(d) for d in self.layer_dims]
        if len(dims) < 3 or any(d < 1 for d in dims):
            raise ConstructionError(f"need at least one hidden layer of positive width, got {dims}")
        self.layer_dims = dims
        if self.output_activation not in ACTIVATIONS:
            raise ConstructionError(f"unknown output activation {self.output_activation!r}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise DimensionError("need one weight matrix and one bias vector per layer")
        ws, bs = [], []
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            W = _as_f64(W).reshape(dims[l + 1], -1) if np.ndim(W) != 2 else _as_f64(W)
            b = _as_f64(b).ravel()
            if W.shape != (dims[l + 1], dims[l]):
                raise DimensionError(f"weights[{l}] has shape {W.shape}, expected {(dims[l + 1], dims[l])}")
            if b.shape != (dims[l + 1],):
                raise DimensionError(f"biases[{l}] has length {b.shape[0]}, expected {dims[l + 1]}")
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise InvalidInputError(f"non-finite entries in layer {l + 1}")
            ws.append(W)
            bs.append(b)
        self.weights, self.biases = ws, bs

    @property
    def k(self) -> int:
        """Number of hidden layers."""
        return len(self.layer_dims) - 2

    @property
    def n_in(self) -> int:
        return self.layer_dims[0]

    @property
    def n_out(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "NetworkSpec":
        return NetworkSpec(
            list(self.layer_dims),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.output_activation,
        )

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        try:
            return cls(d["layer_dims"], d["weights"], d["biases"], d.get("output_activation", "identity"))
        except KeyError as e:
            raise ConstructionError(f"model dict missing field {e}") from e

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "NetworkSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def he_init(layer_dims, seed: int = 0, output_activation: str = "identity") -> NetworkSpec:
    """Weights ~ N(0, 2/fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    dims = list(layer_dims)
    weights = [rng.normal(0.0, np.sqrt(2.0 / dims[l]), size=(dims[l + 1], dims[l])) for l in range(len(dims) - 1)]
    biases = [np.zeros(dims[l + 1]) for l in range(len(dims) - 1)]
    return NetworkSpec(dims, weights, biases, output_activation)


# -- output activations ------------------------------------------------------

def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    """Columnwise softmax; also accepts a 1-d vector."""
    zs = z - z.max(axis=0, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=0, keepdims=True)


def phi_apply(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return np.asarray(z, dtype=np.float64)
    if kind == "sigmoid":
        return sigmoid(np.asarray(z, dtype=np.float64))
    if kind == "tanh":
        return np.tanh(z)
    if kind == "softmax":
        return softmax(np.asarray(z, dtype=np.float64))
    raise ConfigError(f"unknown activation {kind!r}")


def phi_jacobian_apply(kind: str, z: np.ndarray, v: np.ndarray) -> np.ndarray:
    """J_phi(z)^T v, columnwise for batched z, v.

    The Jacobians are symmetric: sigmoid/tanh are diagonal, softmax is
    diag(s) - s s^T, so J^T v = J v.
    """
    if kind == "identity":
        return np.asarray(v, dtype=np.float64)
    if kind == "sigmoid":
        s = sigmoid(z)
        return s * (1.0 - s) * v
    if kind == "tanh":
        t = np.tanh(z)
        return (1.0 - t * t) * v
    if kind == "softmax":
        s = softmax(z)
        return s * v - s * (s * v).sum(axis=0, keepdims=True)
    raise ConfigError(f"unknown activation {kind!r}")


# -- activation patterns ------------------------------------------------------

def relu_pattern(z) -> np.ndarray:
    """Binary mask with entry 1 where z >= 0 (exact sign test, no tolerance)."""
    z = _as_f64(z)
    if np.isnan(z).any():
        raise InvalidInputError("NaN pre-activation has no activation pattern")
    return (z >= 0.0).astype(np.float64)


@dataclass
class ActivationPattern:
    """Per-hidden-layer binary diagonal of the ReLU matrix."""

    masks: list[np.ndarray]

    def __post_init__(self):
        self.masks = [_as_f64(m) for m in self.masks]

    @classmethod
    def from_z(cls, z_list) -> "ActivationPattern":
        return cls([relu_pattern(z) for z in z_list])

    def __eq__(self, other) -> bool:
        if not isinstance(other, ActivationPattern) or len(self.masks) != len(other.masks):
            return NotImplemented if not isinstance(other, ActivationPattern) else False
        return all(a.shape == b.shape and (a == b).all() for a, b in zip(self.masks, other.masks))


# -- forward pass -------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Intermediate quantities of one forward pass (batched if the input was)."""

    z: list[np.ndarray]
    a: list[np.ndarray]
    y_hat: np.ndarray
    pattern: ActivationPattern = field(repr=False)


def forward_pass(spec: NetworkSpec, x, pattern: ActivationPattern | None = None) -> ForwardTrace:
    """z(l) = W(l) a(l-1) + b(l), a(l) = ReLU(z(l)), y = phi(z(k+1)).

    With an explicit ``pattern`` the hidden activations use the frozen masks,
    a(l) = mask(l) * z(l), instead of the sign of the computed z(l).
    """
    x = _as_f64(x)
    single = x.ndim == 1
    if x.shape[0] != spec.n_in:
        raise DimensionError(f"input has {x.shape[0]} coordinates, expected {spec.n_in}")
    a = x
    zs, acts, masks = [], [], []
    for l in range(spec.k + 1):
        b = spec.biases[l] if single else spec.biases[l][:, None]
        z = spec.weights[l] @ a + b
        zs.append(z)
        if l < spec.k:
            mask = relu_pattern(z) if pattern is None else _as_f64(pattern.masks[l])
            masks.append(mask)
            a = mask * z
            acts.append(a)
    y_hat = phi_apply(spec.output_activation, zs[-1])
    return ForwardTrace(zs, acts, y_hat, ActivationPattern(masks))
