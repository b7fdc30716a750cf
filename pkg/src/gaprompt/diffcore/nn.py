"""Parameter containers and the few layers the models are built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor, default_dtype


class Module:
    """Parameter container with dotted-path naming.

    Parameters, sub-modules and lists of sub-modules assigned as attributes
    are discovered in attribute insertion order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_frozen(self, frozen: bool) -> None:
        for p in self.parameters():
            p.frozen = frozen

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        w = np.zeros((in_dim, out_dim)) if zero_init else _xavier(rng, in_dim, out_dim)
        self.weight = Parameter(w.astype(default_dtype()))
        self.bias = Parameter(np.zeros(out_dim, dtype=default_dtype())) if bias else None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim, dtype=default_dtype()))
        self.bias = Parameter(np.zeros(dim, dtype=default_dtype()))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return F.layernorm(x, self.weight, self.bias, self.eps)


class MLP(Module):
    """Linear layers with GELU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator, zero_last: bool = False):
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, zero_init=zero_last and i == len(dims) - 2)
            for i in range(len(dims) - 1)
        ]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x
