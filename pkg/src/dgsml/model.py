"""Fully-connected feature extractor and linear task head."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import engine as E
from .engine import DimensionError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 2
    hidden_dims: tuple[int, ...] = (32, 32)
    feature_dim: int = 16
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer widths must be >= 1, got {dims}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim)
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class ModelParams:
    """theta: feature-extractor layers ``W0, b0, W1, b1, ...``; phi: head ``W, b``."""

    theta: dict[str, Tensor]
    phi: dict[str, Tensor] = field(default_factory=dict)

    def names(self) -> list[str]:
        return [f"theta.{k}" for k in self.theta] + [f"phi.{k}" for k in self.phi]

    def tensors(self) -> list[Tensor]:
        return list(self.theta.values()) + list(self.phi.values())

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return zip(self.names(), self.tensors())

    @property
    def n_layers(self) -> int:
        return len(self.theta) // 2

    def rebuild(self, tensors: Sequence[Tensor]) -> "ModelParams":
        """New params with the same names, taking tensors in ``tensors()`` order."""
        tensors = list(tensors)
        nt = len(self.theta)
        if len(tensors) != nt + len(self.phi):
            raise DimensionError("tensor count does not match parameter set")
        return ModelParams(dict(zip(self.theta, tensors[:nt])), dict(zip(self.phi, tensors[nt:])))

    def detached(self, requires_grad: bool = True) -> "ModelParams":
        """Fresh leaves holding the same values."""
        return self.rebuild([Tensor(t.data.copy(), requires_grad=requires_grad) for t in self.tensors()])

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors()])

    def from_flat(self, vec: np.ndarray, requires_grad: bool = True) -> "ModelParams":
        out, i = [], 0
        for t in self.tensors():
            n = t.size
            out.append(Tensor(vec[i : i + n].reshape(t.shape).copy(), requires_grad=requires_grad))
            i += n
        return self.rebuild(out)

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors())


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    theta = {}
    for i, (fi, fo) in enumerate(config.layer_dims):
        theta[f"W{i}"] = Tensor(_glorot(rng, fi, fo), requires_grad=True)
        theta[f"b{i}"] = Tensor(np.zeros(fo), requires_grad=True)
    phi = {
        "W": Tensor(_glorot(rng, config.feature_dim, config.num_classes), requires_grad=True),
        "b": Tensor(np.zeros(config.num_classes), requires_grad=True),
    }
    return ModelParams(theta, phi)


def _as_input(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"expected a (batch, features) matrix, got shape {x.shape}")
    return x


def extract_features(params: ModelParams, x) -> Tensor:
    """Affine + relu for hidden layers; the last (feature) layer is affine only."""
    h = _as_input(x)
    width = params.theta["W0"].shape[0]
    if h.shape[1] != width:
        raise DimensionError(f"input width {h.shape[1]} != model input dim {width}")
    n = params.n_layers
    for i in range(n):
        h = E.add(E.matmul(h, params.theta[f"W{i}"]), params.theta[f"b{i}"])
        if i < n - 1:
            h = E.relu(h)
    return h


def head_logits(params: ModelParams, features: Tensor) -> Tensor:
    return E.add(E.matmul(features, params.phi["W"]), params.phi["b"])


def logits(params: ModelParams, x) -> Tensor:
    return head_logits(params, extract_features(params, x))


def predict(params: ModelParams, x) -> Tensor:
    """Class-probability rows."""
    return E.softmax(logits(params, x), axis=1)


def predict_labels(params: ModelParams, x) -> np.ndarray:
    with E.no_grad():
        return np.argmax(logits(params, x).data, axis=1)


def accuracy(params: ModelParams, x, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict_labels(params, x) == y))


def sgd_step(params: ModelParams, grads: Sequence[Tensor], lr: float, track: bool = False) -> ModelParams:
    """p - lr * g for every parameter.

    With ``track`` the update is recorded, so a loss evaluated at the result
    can be differentiated back to ``params``. Otherwise the result is a set of
    fresh leaves.
    """
    tensors = params.tensors()
    grads = list(grads)
    if len(grads) != len(tensors):
        raise DimensionError("gradient count does not match parameter set")
    for p, g in zip(tensors, grads):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    if track:
        return params.rebuild([E.sub(p, E.scalar_mul(g, lr)) for p, g in zip(tensors, grads)])
    return params.rebuild(
        [Tensor(p.data - lr * g.data, requires_grad=True) for p, g in zip(tensors, grads)]
    )


# ------------------------------------------------------------------ checkpoints


def save_params(params: ModelParams, path) -> None:
    """JSON list of {name, shape, values}; floats are written in shortest round-trip form."""
    records = [
        {"name": name, "shape": list(t.shape), "values": [float(v) for v in t.data.ravel()]}
        for name, t in params.items()
    ]
    Path(path).write_text(json.dumps(records, indent=1))


def load_params(path) -> ModelParams:
    records = json.loads(Path(path).read_text())
    theta, phi = {}, {}
    for rec in records:
        group, _, key = rec["name"].partition(".")
        arr = np.array(rec["values"], dtype=np.float64).reshape(rec["shape"])
        target = {"theta": theta, "phi": phi}.get(group)
        if target is None:
            raise ValueError(f"unknown parameter group in {rec['name']!r}")
        target[key] = Tensor(arr, requires_grad=True)
    return ModelParams(theta, phi)
