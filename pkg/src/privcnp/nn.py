"""Layers, parameter bookkeeping, the Adam optimiser and checkpoint I/O."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ParamStore:
    """Named parameters with stable ordering."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = ad.parameter(np.asarray(value, dtype=float))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def n_coords(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._params)


def dense(x, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map for inputs (batch, features_in)."""
    return ad.add(ad.matmul(x, weight), bias)


def mlp(x, store: ParamStore, prefix: str, n_layers: int) -> Tensor:
    """Feedforward net with relu hidden activations and a linear head."""
    h = ad.as_tensor(x)
    for i in range(n_layers):
        h = dense(h, store[f"{prefix}.w{i}"], store[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def init_mlp(store: ParamStore, prefix: str, sizes, rng: np.random.Generator,
             zero_last: bool = True, last_bias: float = 0.0) -> int:
    """Glorot-scaled init; the head is zero-initialised so the output starts
    at a controlled constant (`last_bias`)."""
    n_layers = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        last = i == n_layers - 1
        w = np.zeros((fan_in, fan_out)) if (last and zero_last) else \
            scale * rng.standard_normal((fan_in, fan_out))
        b = np.full(fan_out, last_bias) if last else np.zeros(fan_out)
        store.add(f"{prefix}.w{i}", w)
        store.add(f"{prefix}.b{i}", b)
    return n_layers


def init_conv(store: ParamStore, name: str, shape, rng: np.random.Generator,
              transposed: bool = False, zero_init: bool = False):
    """He-scaled init for a conv weight + zero bias.

    Forward convs use (out_ch, in_ch, K) weights; transposed convs use
    (in_ch, out_ch, K), which changes both fan-in and the bias size.
    `zero_init` starts the layer at zero so its output is a controlled
    constant regardless of input magnitude.
    """
    fan_in = (shape[0] if transposed else shape[1]) * shape[2]
    out_ch = shape[1] if transposed else shape[0]
    w = np.zeros(shape) if zero_init else \
        rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(out_ch))


@dataclass
class AdamState:
    """Standard Adam with bias correction; defaults follow the training setup."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState) -> None:
    """One in-place Adam update from the accumulated gradients."""
    state.step_count += 1
    t = state.step_count
    for name, p in store.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p.value))
        v = state.v.setdefault(name, np.zeros_like(p.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def save_params(directory, store: ParamStore) -> None:
    """Manifest (names, shapes, offsets) as JSON plus one raw f64 blob."""
    os.makedirs(directory, exist_ok=True)
    manifest, offset = [], 0
    with open(os.path.join(directory, "params.bin"), "wb") as blob:
        for name, p in store.items():
            raw = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
            manifest.append({
                "name": name,
                "shape": list(p.value.shape),
                "dtype": "f64",
                "offset": offset,
                "nbytes": len(raw),
            })
            blob.write(raw)
            offset += len(raw)
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump({"params": manifest}, fh, indent=2)


def load_params(directory, store: ParamStore) -> None:
    """Load a checkpoint into an existing store with matching names/shapes."""
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)["params"]
    with open(os.path.join(directory, "params.bin"), "rb") as blob:
        data = blob.read()
    for entry in manifest:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in store:
            raise ValueError(f"checkpoint parameter {name!r} unknown to this model")
        arr = np.frombuffer(
            data, dtype="<f8", count=int(np.prod(shape)) if shape else 1,
            offset=entry["offset"],
        ).reshape(shape)
        if store[name].value.shape != arr.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        store[name].value = arr.astype(float).copy()
