"""Parameters, small layers, Adam and checkpoint files."""
from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import tensor_engine as ag
from .tensor_engine import Tensor

CHECKPOINT_FORMAT = "opa-ckpt-v1"


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be read back into a network."""


class Parameter(Tensor):
    """A named trainable tensor carrying Adam moment buffers."""

    __slots__ = ("name", "m", "v")

    def __init__(self, name, values):
        super().__init__(values, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.values)
        self.v = np.zeros_like(self.values)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Module:
    """Holds an ordered set of uniquely named parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add_param(self, name, values) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, values)
        self._params[name] = p
        return p

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def clear_grad(self):
        for p in self._params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, p in self._params.items():
            if name not in state:
                raise CheckpointError(f"missing parameter {name!r}")
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != p.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {values.shape}, network {p.shape}"
                )
            p.values = values.copy()
        return self

    @contextmanager
    def frozen(self):
        """Treat every parameter as a constant inside the block."""
        params = self.parameters()
        prev = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, prev):
                p.requires_grad = flag


class Linear:
    def __init__(self, module: Module, name: str, n_in: int, n_out: int, rng, zero=False, bias_init=0.0):
        scale = 0.0 if zero else np.sqrt(2.0 / n_in)
        self.weight = module.add_param(f"{name}.weight", rng.normal(0.0, 1.0, (n_in, n_out)) * scale)
        self.bias = module.add_param(f"{name}.bias", np.full(n_out, bias_init, dtype=np.float64))

    def __call__(self, x):
        return ag.add(ag.matmul(x, self.weight), self.bias)


class MLP:
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, module: Module, name: str, sizes, rng, zero_last=False, last_relu=False):
        self.layers = [
            Linear(module, f"{name}.{i}", a, b, rng, zero=zero_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.last_relu = last_relu

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.last_relu:
                x = ag.relu(x)
        return x


class Adam:
    """Adam with bias correction; gradients are zeroed after each step."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self):
        missing = [p.name for p in self.params if p.grad is None]
        if missing:
            raise ValueError(f"missing gradients for {missing}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            p.m = b1 * p.m + (1.0 - b1) * g
            p.v = b2 * p.v + (1.0 - b2) * g * g
            p.values = p.values - self.lr * (p.m / c1) / (np.sqrt(p.v / c2) + self.eps)
            p.grad = np.zeros_like(p.values)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def multistep_lr(epoch: int, base_lr: float, milestones, factors) -> float:
    """Learning rate after multiplying by ``factors[i]`` at each reached milestone."""
    lr = base_lr
    for m, f in zip(milestones, factors):
        if epoch >= m:
            lr *= f
    return lr


def save_checkpoint(module: Module, path, extra: dict | None = None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "params": [
            {"name": name, "shape": list(p.shape), "values": p.values.ravel().tolist()}
            for name, p in module.named_parameters().items()
        ],
    }
    if extra:
        doc["meta"] = extra
    Path(path).write_text(json.dumps(doc))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Parse a checkpoint file into ``{name: array}`` with field-level errors."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: top level must be an object")
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: field 'format' must be {CHECKPOINT_FORMAT!r}, got {doc.get('format')!r}")
    if not isinstance(doc.get("params"), list):
        raise CheckpointError(f"{path}: field 'params' missing or not a list")
    state = {}
    for i, entry in enumerate(doc["params"]):
        for key in ("name", "shape", "values"):
            if key not in entry:
                raise CheckpointError(f"{path}: params[{i}] missing field {key!r}")
        try:
            values = np.asarray(entry["values"], dtype=np.float64)
            shape = tuple(int(s) for s in entry["shape"])
            values = values.reshape(shape)
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: params[{i}] ({entry['name']!r}) field 'values': {exc}") from None
        state[entry["name"]] = values
    return state


def checkpoint_meta(path) -> dict:
    """The optional ``meta`` object of a checkpoint (empty when absent)."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    meta = doc.get("meta", {}) if isinstance(doc, dict) else {}
    if not isinstance(meta, dict):
        raise CheckpointError(f"{path}: field 'meta' must be an object")
    return meta


def load_checkpoint(module: Module, path) -> Module:
    return module.load_state_dict(read_checkpoint(path))
