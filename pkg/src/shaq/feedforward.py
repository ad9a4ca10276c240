"""Post-attention feed-forward variants: Boom, a plain two-layer FC, or nothing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor

KINDS = ("boom", "fc", "none")


@dataclass(frozen=True)
class FeedForwardSpec:
    kind: str = "boom"
    d_model: int = 1024
    d_inner: int = 4096

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feed-forward kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "boom" and self.d_inner % self.d_model:
            raise ValueError(f"boom needs d_inner divisible by d_model, got {self.d_inner} / {self.d_model}")

    @property
    def chunks(self) -> int:
        return self.d_inner // self.d_model

    def param_count(self) -> int:
        if self.kind == "none":
            return 0
        expand = self.d_model * self.d_inner + self.d_inner
        if self.kind == "boom":
            return expand
        return expand + self.d_inner * self.d_model + self.d_model


def chunk_sum(u: Tensor, width: int) -> Tensor:
    """Sum the contiguous ``width``-wide slices of the last axis."""
    n = u.shape[-1] // width
    return u.reshape(u.shape[:-1] + (n, width)).sum(axis=-2)


class FeedForward(Module):
    def __init__(self, spec: FeedForwardSpec, rng: np.random.Generator):
        self.spec = spec
        self.expand = Linear(spec.d_model, spec.d_inner, rng) if spec.kind != "none" else None
        self.contract = Linear(spec.d_inner, spec.d_model, rng) if spec.kind == "fc" else None

    def forward(self, x: Tensor) -> Tensor:
        kind = self.spec.kind
        if kind == "none":
            return x
        u = T.gelu(self.expand(x))
        if kind == "boom":
            return chunk_sum(u, self.spec.d_model)
        return self.contract(u)


def boom_forward(x: Tensor, ff: FeedForward) -> Tensor:
    if ff.spec.kind != "boom":
        raise ValueError(f"boom_forward on a {ff.spec.kind!r} layer")
    return ff(x)


def fc_forward(x: Tensor, ff: FeedForward) -> Tensor:
    if ff.spec.kind != "fc":
        raise ValueError(f"fc_forward on a {ff.spec.kind!r} layer")
    return ff(x)
