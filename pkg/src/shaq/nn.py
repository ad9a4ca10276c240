"""Module container and the primitive layers built on ``shaq.tensor``."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Attribute-based parameter registry with a train/eval switch.

    Parameters and sub-modules are discovered from instance attributes (lists
    and dicts of modules included), so names are the attribute paths joined
    with dots, e.g. ``blocks.0.cell.weight``.
    """

    training: bool = True

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
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{k}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            children = value if isinstance(value, (list, tuple)) else (
                value.values() if isinstance(value, dict) else (value,))
            for child in children:
                if isinstance(child, Module):
                    yield from child.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        unexpected = state.keys() - own.keys()
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform(rng: np.random.Generator, shape, bound: float) -> Parameter:
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(T.get_default_dtype()))


class Linear(Module):
    """``y = x @ weight + bias`` with weight stored as ``[d_in, d_out]``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = uniform(rng, (d_in, d_out), bound)
        self.bias = Parameter(np.zeros(d_out, dtype=T.get_default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = Parameter((rng.standard_normal((vocab, dim)) * std).astype(T.get_default_dtype()))

    def forward(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        dtype = T.get_default_dtype()
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class RngSource:
    """Shared, reseedable generator handle so every dropout site draws from one stream."""

    def __init__(self, seed=0):
        self.generator = np.random.default_rng(seed)

    def reseed(self, seed) -> None:
        self.generator = np.random.default_rng(seed)


class Dropout(Module):
    def __init__(self, p: float, source: RngSource | None = None):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.source = source if source is not None else RngSource()

    def forward(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.p, self.training, self.source.generator)
