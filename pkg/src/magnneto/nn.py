"""Dense MLPs with hand-written reverse mode, Adam, and a checkpoint format.

Everything is float64 numpy. Inputs may carry any number of leading batch
axes; parameter gradients are summed over them.

Checkpoint layout (version 1)::

    MAGNNETO-CKPT 1\\n
    <one-line JSON header>\\n
    <raw tensor bytes>

The header is ``{"meta": {...}, "tensors": [{"name", "shape", "dtype"}, ...]}``
and the raw section is each tensor's C-order little-endian float64 bytes,
concatenated in header order. ``load(save(x)) == x`` bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "linear")
CHECKPOINT_MAGIC = b"MAGNNETO-CKPT 1\n"


class ShapeError(ValueError):
    pass


@dataclass
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"bad layer shapes {self.weight.shape}, {self.bias.shape}")


@dataclass
class Mlp:
    layers: list[Dense]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ShapeError(f"layer dims do not chain: {a.weight.shape} -> {b.weight.shape}")

    @classmethod
    def create(cls, sizes, rng: np.random.Generator, hidden_activation="relu") -> "Mlp":
        """Glorot-uniform weights, zero biases; hidden layers use
        ``hidden_activation`` and the output layer is linear."""
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weight = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            act = "linear" if i == len(sizes) - 2 else hidden_activation
            layers.append(Dense(weight, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def forward(self, x: np.ndarray):
        """Return ``(output, cache)``; the cache feeds :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"expected input dim {self.in_dim}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        a = x.reshape(-1, self.in_dim)
        inputs = []
        for layer in self.layers:
            inputs.append(a)
            z = a @ layer.weight + layer.bias
            a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        return a.reshape(*lead, self.out_dim), (lead, inputs, a)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out: np.ndarray):
        """Return ``(param_grads, grad_input)`` with ``param_grads`` laid out
        like :meth:`params`. The relu subgradient at 0 is 0."""
        lead, inputs, out = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != (*lead, self.out_dim):
            raise ShapeError(f"output gradient shape {g.shape} != {(*lead, self.out_dim)}")
        g = g.reshape(-1, self.out_dim)
        grads: list[np.ndarray] = []
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.activation == "relu":
                post = inputs[i + 1] if i + 1 < len(inputs) else out
                g = g * (post > 0)
            grads.append(g.sum(axis=0))
            grads.append(inputs[i].T @ g)
            g = g @ layer.weight.T
        grads.reverse()
        return grads, g.reshape(*lead, self.in_dim)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def named_params(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight
            out[f"{prefix}.{i}.bias"] = layer.bias
        return out

    def copy(self) -> "Mlp":
        return Mlp([Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])


def mlp_forward(net: Mlp, x):
    return net.forward(x)


def mlp_backward(net: Mlp, cache, grad_out):
    return net.backward(cache, grad_out)


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if params.keys() != grads.keys():
        raise ShapeError("parameter and gradient names differ")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = {
        "meta": meta or {},
        "tensors": [{"name": k, "shape": list(v.shape), "dtype": "<f8"} for k, v in tensors.items()],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    rest = data[len(CHECKPOINT_MAGIC) :]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    blob = rest[nl + 1 :]
    tensors, offset = {}, 0
    for entry in header["tensors"]:
        count = math.prod(entry["shape"])
        arr = np.frombuffer(blob, dtype=entry["dtype"], count=count, offset=offset)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        offset += count * 8
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes after tensors")
    return tensors, header["meta"]
