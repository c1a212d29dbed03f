"""Parameter containers, initializers and small building blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator used for every parameter draw."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), trainable=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), trainable=True)


class Module:
    """Holds tensors and sub-modules as attributes; parameters are discovered in attribute order."""

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        seen: set[int] = set()
        for _, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            yield from _walk(f"{prefix}{name}", val)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, list]:
        return {k: p.data.tolist() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        named = dict(self.named_parameters())
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in named.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(name, val):
    if isinstance(val, Tensor):
        if val.trainable:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk(f"{name}.{i}", v)
    elif isinstance(val, dict):
        for k in val:
            yield from _walk(f"{name}.{k}", val[k])


class Linear(Module):
    """``y = x W + b`` on row vectors; ``x`` has shape ``(..., d_in)``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        self.d_in, self.d_out = d_in, d_out
        if zero:
            self.weight = zeros_param((d_in, d_out))
            self.bias = zeros_param((d_out,)) if bias else None
        else:
            self.weight = uniform_init(rng, (d_in, d_out), d_in)
            self.bias = uniform_init(rng, (d_out,), d_in) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight) if x.ndim >= 2 else ad.reshape(ad.matmul(ad.reshape(x, (1, -1)), self.weight), (-1,))
        if self.bias is None:
            return y
        return y + ad.broadcast_to(self.bias, y.shape)


_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu, "sigmoid": ad.sigmoid}


class MLP(Module):
    """Stack of linear layers with a hidden activation; the last layer is linear."""

    def __init__(self, sizes, rng, activation: str = "tanh", bias: bool = True, zero_last: bool = False):
        self.sizes = list(sizes)
        self.activation = activation
        n = len(self.sizes) - 1
        self.layers = [
            Linear(self.sizes[i], self.sizes[i + 1], rng, bias=bias, zero=zero_last and i == n - 1)
            for i in range(n)
        ]

    def forward(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """Standard sine/cosine position table of shape ``(length, dim)``."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
