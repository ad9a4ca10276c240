"""LAMB and Adam with decoupled weight decay, global-norm clipping, LR schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Parameter


class NonFiniteGradient(FloatingPointError):
    """A gradient contained inf/nan; the step was not applied."""


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


class _AdaptiveBase:
    """Shared Adam moment bookkeeping; subclasses decide the per-tensor scale."""

    def __init__(
        self,
        params: Sequence[Parameter] | dict[str, Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-6,
        weight_decay: float = 0.0,
    ):
        if isinstance(params, dict):
            self.params = dict(params)
        else:
            self.params = {p.name or f"param{i}": p for i, p in enumerate(params)}
        if len(self.params) != len(set(id(p) for p in self.params.values())):
            raise ValueError("the same tensor is registered twice")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState()

    def _check_finite(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in {name}")

    def _trust_ratio(self, w: np.ndarray, update: np.ndarray) -> float:
        return 1.0

    def step(self) -> None:
        self._check_finite()
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**st.step
        bias2 = 1.0 - b2**st.step
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = st.exp_avg.get(name)
            v = st.exp_avg_sq.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            st.exp_avg[name], st.exp_avg_sq[name] = m, v
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            ratio = self._trust_ratio(p.data, update)
            p.data = (p.data - (self.lr * ratio) * update).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- serialization ----------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "step": self.state.step,
            "exp_avg": {k: v.copy() for k, v in self.state.exp_avg.items()},
            "exp_avg_sq": {k: v.copy() for k, v in self.state.exp_avg_sq.items()},
            "hyper": self.hyperparameters(),
        }

    def load_state_dict(self, state: dict) -> None:
        unknown = (set(state["exp_avg"]) | set(state["exp_avg_sq"])) - set(self.params)
        if unknown:
            raise KeyError(f"optimizer state for unknown parameters: {sorted(unknown)}")
        self.state = OptimizerState(
            int(state["step"]),
            {k: np.array(v, copy=True) for k, v in state["exp_avg"].items()},
            {k: np.array(v, copy=True) for k, v in state["exp_avg_sq"].items()},
        )

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay}


class Adam(_AdaptiveBase):
    """Bias-corrected Adam; decay is decoupled: ``w -= lr * (adam_dir + wd * w)``."""


class Lamb(_AdaptiveBase):
    """Adam direction rescaled per tensor by ``||w|| / ||update||``, clamped."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-6,
                 weight_decay: float = 0.0, clamp: tuple[float, float] = (0.0, 10.0)):
        super().__init__(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        lo, hi = clamp
        if lo > hi:
            raise ValueError(f"trust clamp lower bound {lo} exceeds upper bound {hi}")
        self.clamp = (lo, hi)
        self.last_ratios: dict[int, float] = {}

    def _trust_ratio(self, w: np.ndarray, update: np.ndarray) -> float:
        w_norm = float(np.linalg.norm(w))
        u_norm = float(np.linalg.norm(update))
        raw = w_norm / u_norm if w_norm > 0.0 and u_norm > 0.0 else 1.0
        ratio = min(max(raw, self.clamp[0]), self.clamp[1])
        self.last_ratios[id(w)] = ratio
        return ratio

    def hyperparameters(self) -> dict:
        return {**super().hyperparameters(), "clamp": list(self.clamp)}


def trust_ratio(w: np.ndarray, update: np.ndarray) -> float:
    """Unclamped layerwise trust ratio (1 when either norm vanishes)."""
    w_norm, u_norm = float(np.linalg.norm(w)), float(np.linalg.norm(update))
    return w_norm / u_norm if w_norm > 0.0 and u_norm > 0.0 else 1.0


def lamb_step(optimizer: Lamb) -> None:
    optimizer.step()


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype, copy=False)
    return total


@dataclass(frozen=True)
class LRSchedule:
    """Constant, or linear warmup from 0 to ``lr`` over ``warmup`` steps then constant."""

    lr: float = 2e-3
    warmup: int = 0

    def __call__(self, step: int, epoch: int = 0) -> float:
        return lr_schedule(step, epoch, self)


def lr_schedule(step: int, epoch: int, spec: LRSchedule) -> float:
    if spec.warmup <= 0 or step >= spec.warmup:
        return spec.lr
    return spec.lr * max(step, 0) / spec.warmup
