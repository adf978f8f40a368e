"""Parameter containers, initializers and layer helpers over the autograd core."""

from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ModelParams:
    """Named parameters plus non-trainable buffers (batch-norm statistics).

    Names are dotted paths such as ``"trans.conv1.w"``.  ``training``
    selects batch statistics (True) or running statistics (False) in
    batch-norm layers.
    """

    def __init__(self, params=None, buffers=None):
        self.params: dict[str, Tensor] = dict(params or {})
        self.buffers: dict[str, np.ndarray] = dict(buffers or {})
        self.training = True

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        self.buffers[name] = np.asarray(value, dtype=ag.get_dtype()).copy()

    def update(self, other: "ModelParams") -> None:
        self.params.update(other.params)
        self.buffers.update(other.buffers)

    def count(self, prefix: str = "") -> int:
        """Number of scalar trainable parameters whose name starts with ``prefix``."""
        return int(sum(t.size for n, t in self.params.items() if n.startswith(prefix)))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def train(self) -> "ModelParams":
        self.training = True
        return self

    def eval(self) -> "ModelParams":
        self.training = False
        return self

    def copy(self) -> "ModelParams":
        out = ModelParams(
            {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.params.items()},
            {n: b.copy() for n, b in self.buffers.items()},
        )
        out.training = self.training
        return out

    def astype(self, dtype) -> "ModelParams":
        out = copy.copy(self)
        out.params = {n: Tensor(t.data.astype(dtype), requires_grad=True, name=n) for n, t in self.params.items()}
        out.buffers = {n: b.astype(dtype) for n, b in self.buffers.items()}
        return out

    def running(self, prefix: str) -> dict:
        return {"mean": self.buffers[f"{prefix}.running_mean"], "var": self.buffers[f"{prefix}.running_var"]}


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_conv(p: ModelParams, rng, name: str, c_in: int, c_out: int, k: int, bias: bool = True) -> None:
    """He-normal kernel; ``bias=False`` for layers followed by batch norm,
    where a bias is cancelled by the mean subtraction."""
    p.add(f"{name}.w", he_normal(rng, (c_out, c_in, k, k), c_in * k * k))
    if bias:
        p.add(f"{name}.b", np.zeros(c_out))


def init_linear(p: ModelParams, rng, name: str, d_in: int, d_out: int, bias: bool = True) -> None:
    p.add(f"{name}.w", he_normal(rng, (d_in, d_out), d_in))
    if bias:
        p.add(f"{name}.b", np.zeros(d_out))


def init_layernorm(p: ModelParams, name: str, d: int) -> None:
    p.add(f"{name}.gamma", np.ones(d))
    p.add(f"{name}.beta", np.zeros(d))


def init_batchnorm(p: ModelParams, name: str, c: int) -> None:
    init_layernorm(p, name, c)
    p.add_buffer(f"{name}.running_mean", np.zeros(c))
    p.add_buffer(f"{name}.running_var", np.ones(c))


def conv(x: Tensor, p: ModelParams, name: str, pad: int = 0, stride: int = 1) -> Tensor:
    w = p[f"{name}.w"]
    b = p.params.get(f"{name}.b")
    if b is None:
        b = Tensor(np.zeros(w.shape[0]))
    return ag.conv2d(x, w, b, stride=stride, pad=pad)


def linear(x: Tensor, p: ModelParams, name: str) -> Tensor:
    out = ag.matmul(x, p[f"{name}.w"])
    b = p.params.get(f"{name}.b")
    return out if b is None else out + b


def layernorm(x: Tensor, p: ModelParams, name: str) -> Tensor:
    return ag.normalize(x, "layernorm", (p[f"{name}.gamma"], p[f"{name}.beta"]))


def batchnorm(x: Tensor, p: ModelParams, name: str) -> Tensor:
    return ag.normalize(
        x,
        "batchnorm2d",
        (p[f"{name}.gamma"], p[f"{name}.beta"]),
        running=p.running(name),
        training=p.training,
    )
