"""Per-time-step networks: dense layers, batch normalization and heads."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .constraints import OutputTransform

SNAPSHOT_FORMAT = "deepsmp-params/1"


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


class DenseLayer:
    def __init__(self, name: str, in_dim: int, out_dim: int, rng, use_bias: bool = False):
        if in_dim < 1 or out_dim < 1:
            raise ValueError("dense layer dims must be positive")
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.weights = dc.Parameter(f"{name}/kernel", _rng(rng).uniform(-limit, limit, (in_dim, out_dim)))
        self.bias = dc.Parameter(f"{name}/bias", np.zeros((1, out_dim))) if use_bias else None

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def parameters(self) -> list[dc.Parameter]:
        return [self.weights] if self.bias is None else [self.weights, self.bias]

    def __call__(self, x: dc.Value) -> dc.Value:
        tape = x.tape
        out = dc.matmul(x, tape.parameter(self.weights))
        if self.bias is not None:
            out = out + tape.parameter(self.bias)
        return out


def _bn_train(x: dc.Value, gamma: dc.Value, beta: dc.Value, eps: float):
    """Fused training-mode batch norm; returns the output and the batch moments."""
    d = x.data
    b = d.shape[0]
    mean = d.mean(axis=0, keepdims=True)
    centered = d - mean
    var = (centered * centered).mean(axis=0, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    g_data = gamma.data

    def backward(g):
        dxhat = g * g_data
        dx = inv_std / b * (b * dxhat - dxhat.sum(axis=0, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=0, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    out = x.tape._push(
        xhat * g_data + beta.data,
        (x.idx, gamma.idx, beta.idx),
        backward,
        x.requires_grad or gamma.requires_grad or beta.requires_grad,
    )
    return out, mean, var


class BatchNormLayer:
    def __init__(self, name: str, dim: int, epsilon: float = 1e-3, momentum: float = 0.99):
        if epsilon <= 0:
            raise ValueError("batch-norm epsilon must be positive")
        if not 0 < momentum < 1:
            raise ValueError("batch-norm momentum must lie in (0, 1)")
        self.gamma = dc.Parameter(f"{name}/gamma", np.ones((1, dim)))
        self.beta = dc.Parameter(f"{name}/beta", np.zeros((1, dim)))
        self.running_mean = np.zeros((1, dim))
        self.running_var = np.ones((1, dim))
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.name = name

    @property
    def dim(self) -> int:
        return self.gamma.shape[1]

    def parameters(self) -> list[dc.Parameter]:
        return [self.gamma, self.beta]

    def __call__(self, x: dc.Value, training: bool) -> dc.Value:
        if x.shape[0] < 1:
            raise ValueError("empty batch")
        tape = x.tape
        gamma, beta = tape.parameter(self.gamma), tape.parameter(self.beta)
        if training:
            out, mean, var = _bn_train(x, gamma, beta, self.epsilon)
            mom = self.momentum
            self.running_mean = self.running_mean * mom + mean * (1.0 - mom)
            self.running_var = self.running_var * mom + var * (1.0 - mom)
            return out
        scale = 1.0 / np.sqrt(self.running_var + self.epsilon)
        return (x - self.running_mean) * scale * gamma + beta


class FeedForwardHead:
    """``BN -> [Dense(no bias) -> BN -> ReLU] x len(hidden) -> Dense(bias)`` plus a transform."""

    def __init__(
        self,
        name: str,
        in_dim: int,
        out_dim: int,
        hidden: Sequence[int] = (11, 11),
        transform: OutputTransform | None = None,
        bn_epsilon: float = 1e-3,
        bn_momentum: float = 0.99,
        rng=None,
    ):
        rng = _rng(rng)
        self.name = name
        self.transform = transform or OutputTransform()
        dims = [in_dim, *hidden]
        self.norms = [BatchNormLayer(f"{name}/bn0", in_dim, bn_epsilon, bn_momentum)]
        self.dense = []
        for k, (a, b) in enumerate(zip(dims, dims[1:])):
            self.dense.append(DenseLayer(f"{name}/dense{k}", a, b, rng))
            self.norms.append(BatchNormLayer(f"{name}/bn{k + 1}", b, bn_epsilon, bn_momentum))
        self.dense.append(DenseLayer(f"{name}/dense{len(hidden)}", dims[-1], out_dim, rng, use_bias=True))

    @property
    def in_dim(self) -> int:
        return self.norms[0].dim

    @property
    def out_dim(self) -> int:
        return self.dense[-1].out_dim

    def parameters(self) -> list[dc.Parameter]:
        out = []
        for layer in [*self.norms, *self.dense]:
            out.extend(layer.parameters())
        return out

    def raw(self, x: dc.Value, training: bool) -> dc.Value:
        if x.shape[1] != self.in_dim:
            raise ValueError(f"{self.name}: expected {self.in_dim} input columns, got {x.shape[1]}")
        if x.shape[0] < 1:
            raise ValueError("empty batch")
        h = self.norms[0](x, training)
        for dense, norm in zip(self.dense[:-1], self.norms[1:]):
            h = dc.relu(norm(dense(h), training))
        return self.dense[-1](h)

    def __call__(self, x: dc.Value, training: bool) -> dc.Value:
        return self.transform.apply(self.raw(x, training))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {p.name: p.value for p in self.parameters()}
        for norm in self.norms:
            out[f"{norm.name}/running_mean"] = norm.running_mean
            out[f"{norm.name}/running_var"] = norm.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.value = _take(arrays, p.name, p.shape)
        for norm in self.norms:
            norm.running_mean = _take(arrays, f"{norm.name}/running_mean", (1, norm.dim))
            norm.running_var = _take(arrays, f"{norm.name}/running_var", (1, norm.dim))


class ConstantHead:
    """A bias row only; used at t0 where the state is deterministic.

    ``floor`` turns on the post-update projection ``max(floor, bias)``.
    """

    def __init__(self, name: str, init_values, transform: OutputTransform | None = None, floor: float | None = None):
        self.name = name
        self.bias = dc.Parameter(f"{name}/bias", init_values)
        self.transform = transform or OutputTransform()
        self.floor = floor

    @property
    def out_dim(self) -> int:
        return self.bias.shape[1]

    def parameters(self) -> list[dc.Parameter]:
        return [self.bias]

    def project(self) -> None:
        if self.floor is not None:
            self.bias.value = np.maximum(self.bias.value, self.floor)

    def __call__(self, tape: dc.Tape) -> dc.Value:
        return self.transform.apply(tape.parameter(self.bias))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {self.bias.name: self.bias.value}

    def load_state_arrays(self, arrays) -> None:
        self.bias.value = _take(arrays, self.bias.name, self.bias.shape)


class ParameterEntry:
    """Lets a bare parameter take part in snapshots."""

    def __init__(self, param: dc.Parameter):
        self.param = param

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {self.param.name: self.param.value}

    def load_state_arrays(self, arrays) -> None:
        self.param.value = _take(arrays, self.param.name, self.param.shape)


def _take(arrays, name, shape):
    if name not in arrays:
        raise KeyError(f"snapshot has no entry {name!r}")
    value = np.asarray(arrays[name], dtype=np.float64)
    if value.shape != tuple(shape):
        raise ValueError(f"{name}: snapshot shape {value.shape} does not match {tuple(shape)}")
    return value.copy()


def init_head(seed, dims: Sequence[int], init_scheme: str = "glorot_uniform", **kwargs) -> FeedForwardHead:
    """Build a head from ``dims = (in_dim, *hidden, out_dim)``."""
    if init_scheme != "glorot_uniform":
        raise ValueError(f"unknown init scheme {init_scheme!r}")
    if len(dims) < 2:
        raise ValueError("dims needs at least input and output sizes")
    name = kwargs.pop("name", "head")
    return FeedForwardHead(name, dims[0], dims[-1], tuple(dims[1:-1]), rng=seed, **kwargs)


def forward_semi_recurrent(head: FeedForwardHead, x: dc.Value, prev_output: dc.Value, training: bool) -> dc.Value:
    """Evaluate ``head`` on the concatenated input ``(x, prev_output)``."""
    if x.shape[1] + prev_output.shape[1] != head.in_dim:
        raise ValueError(
            f"{head.name}: state ({x.shape[1]}) + previous output ({prev_output.shape[1]}) "
            f"columns do not match in_dim {head.in_dim}"
        )
    return head(dc.concat_cols([x, prev_output]), training)


@dataclass
class Snapshot:
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, heads: Iterable) -> "Snapshot":
        for head in heads:
            for name, value in head.state_arrays().items():
                if name in self.entries:
                    raise ValueError(f"duplicate snapshot entry {name!r}")
                self.entries[name] = np.asarray(value, dtype=np.float64)
        return self


def save_params(heads: Iterable, path) -> None:
    """Write heads as ``{"format", "params": [{"name", "shape", "values"}]}`` with row-major values."""
    snap = Snapshot().add(heads)
    payload = {
        "format": SNAPSHOT_FORMAT,
        "params": [
            {"name": name, "shape": list(value.shape), "values": value.reshape(-1).tolist()}
            for name, value in snap.entries.items()
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_params(heads: Iterable, path) -> None:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != SNAPSHOT_FORMAT:
        raise ValueError(f"unsupported snapshot format {payload.get('format')!r}")
    arrays = {
        e["name"]: np.asarray(e["values"], dtype=np.float64).reshape(e["shape"]) for e in payload["params"]
    }
    for head in heads:
        head.load_state_arrays(arrays)
