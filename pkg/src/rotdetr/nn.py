"""Parameter containers and initialisers."""
from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .tensor import Tensor, layer_norm, linear, relu


class Module:
    """Holds parameter tensors and sub-modules as attributes.

    Parameters are discovered by attribute walk in sorted name order, so
    ``named_parameters`` is stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key in sorted(vars(self)):
            val = getattr(self, key)
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


class Parameter(Tensor):
    """Trainable leaf tensor; constant arrays stored on a module are not parameters."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, gain: float = 1.0) -> Tensor:
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out)))


def zeros(*shape) -> Tensor:
    return Parameter(np.zeros(shape))


def ones(*shape) -> Tensor:
    return Parameter(np.ones(shape))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0, zero: bool = False):
        self.weight = zeros(n_in, n_out) if zero else glorot(rng, n_in, n_out, gain=gain)
        self.bias = zeros(n_out)

    def __call__(self, x) -> Tensor:
        return linear(x, self.weight, self.bias)


class MLP(Module):
    """Stack of linear layers with ReLU between them."""

    def __init__(self, rng: np.random.Generator, sizes: list[int], zero_last: bool = False):
        n = len(sizes) - 1
        self.layers = [Linear(rng, sizes[i], sizes[i + 1], zero=zero_last and i == n - 1) for i in range(n)]

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, n: int):
        self.gamma = ones(n)
        self.beta = zeros(n)

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)
