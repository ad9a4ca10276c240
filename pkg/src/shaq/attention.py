"""Single-headed attention over a rolling memory of past recurrent outputs.

Queries go through a linear map; keys and values do not.  Keys and values are
built from ``concat(cached memory, current-window memory)`` (or, in the
mean-memory variant, from the cache's sequence mean followed by the current
window), layer-normalised and multiplied elementwise by learned gates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Dropout, LayerNorm, Linear, Module, RngSource
from .tensor import Parameter, Tensor, ShapeError

VARIANTS = ("gated", "ungated", "mean")


class CacheBatchMismatch(ValueError):
    """The batch size changed under a live cache; the caller must reset it."""


@dataclass(frozen=True)
class MemoryCache:
    """Detached past memories ``[S, B, d]``, oldest first, at most ``cap`` long."""

    cap: int
    mem: np.ndarray | None = None

    def __post_init__(self):
        if self.cap < 0:
            raise ValueError(f"cache cap must be non-negative, got {self.cap}")

    @property
    def size(self) -> int:
        return 0 if self.mem is None else self.mem.shape[0]

    def reset(self) -> MemoryCache:
        return MemoryCache(self.cap)


def cache_update(cache: MemoryCache, new_mem) -> MemoryCache:
    """Append ``new_mem`` along time and keep only the newest ``cap`` entries."""
    new = new_mem.data if isinstance(new_mem, Tensor) else np.asarray(new_mem)
    if new.ndim != 3:
        raise ShapeError(f"memory must be [p, B, d], got {new.shape}")
    if cache.mem is None:
        merged = new
    else:
        if cache.mem.shape[1:] != new.shape[1:]:
            raise CacheBatchMismatch(
                f"cached memory is {cache.mem.shape[1:]} per step but new memory is {new.shape[1:]}"
            )
        merged = np.concatenate([cache.mem, new], axis=0)
    if merged.shape[0] > cache.cap:
        merged = merged[merged.shape[0] - cache.cap :]
    return MemoryCache(cache.cap, np.array(merged, copy=True) if merged.shape[0] else None)


def mean_condense(cache: MemoryCache) -> np.ndarray:
    """Sequence-mean of every cached memory vector, ``[B, d]``."""
    if cache.size == 0:
        raise ValueError("mean_condense on an empty cache")
    return cache.mem.mean(axis=0)


def build_kv_mean(condensed, h: Tensor) -> Tensor:
    """Prepend the condensed memory as one pseudo-timestep: ``[p + 1, B, d]``.

    With ``condensed=None`` (empty cache) the window alone is returned.
    """
    if condensed is None:
        return h
    w = condensed if isinstance(condensed, Tensor) else Tensor(np.asarray(condensed, dtype=h.dtype))
    if w.shape != h.shape[1:]:
        raise ShapeError(f"condensed memory {w.shape} does not match window rows {h.shape[1:]}")
    return T.concat([w.reshape((1,) + w.shape), h], axis=0)


def causal_mask(steps: int, n_past: int) -> np.ndarray:
    """True where query ``i`` must not see key ``j``: in-window keys after ``i``."""
    return np.arange(n_past + steps)[None, :] > (n_past + np.arange(steps))[:, None]


def attention_core(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_past: int,
    p_drop: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """``dropout(softmax(q k^T + mask)) v`` for batch-major ``q [B,p,d]``, ``k, v [B,n_past+p,d]``.

    Fused so the ``[B, p, n_past + p]`` score matrix is materialised once and
    reused in place; the first ``n_past`` keys are visible to every query.
    """
    qd, kd, vd = q.data, k.data, v.data
    steps = qd.shape[1]
    if kd.shape[1] != n_past + steps or vd.shape[:2] != kd.shape[:2]:
        raise ShapeError(f"keys {kd.shape} / values {vd.shape} do not cover {n_past} past + {steps} window steps")
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"attention dropout must lie in [0, 1), got {p_drop}")
    probs = qd @ np.swapaxes(kd, 1, 2)
    window = probs[:, :, n_past:]
    window[:, np.triu(np.ones((steps, steps), dtype=bool), k=1)] = -np.inf
    probs -= probs.max(axis=-1, keepdims=True)
    np.exp(probs, out=probs)
    probs /= probs.sum(axis=-1, keepdims=True)
    if probs.dtype == np.float32:
        # subnormal weights stall BLAS; they are below float32 resolution anyway
        probs[probs < np.finfo(np.float32).tiny] = 0.0
    keep = None
    weights = probs
    if training and p_drop > 0.0:
        if rng is None:
            raise ValueError("train-mode attention dropout needs an rng")
        keep = (rng.random(probs.shape, dtype=probs.dtype) >= p_drop).astype(probs.dtype)
        keep *= probs.dtype.type(1.0 / (1.0 - p_drop))
        weights = probs * keep
    out = weights @ vd

    def backward(g):
        d_weights = g @ np.swapaxes(vd, 1, 2)
        if keep is not None:
            d_weights *= keep
        d_scores = d_weights
        d_scores -= (d_weights * probs).sum(axis=-1, keepdims=True)
        d_scores *= probs
        dq = d_scores @ kd if q.requires_grad else None
        dk = np.swapaxes(d_scores, 1, 2) @ qd if k.requires_grad else None
        dv = np.swapaxes(weights, 1, 2) @ g if v.requires_grad else None
        return dq, dk, dv

    return T._make(out, (q, k, v), backward)


class AttentionHead(Module):
    """One attention head in the gated, ungated, or mean-memory variant.

    ``value_gate_proj`` replaces the plain ``sigmoid(vs)`` value gate with a
    projected gate ``sigmoid(f) * tanh(c)``, ``[c | f] = sigmoid(vs) @ W + b``.  It only
    applies to the gated variants.  ``gate_bypass`` forces every gate to 1.
    """

    def __init__(
        self,
        d: int,
        rng: np.random.Generator,
        variant: str = "gated",
        dropout: float = 0.1,
        value_gate_proj: bool = False,
        norm: bool = True,
        source: RngSource | None = None,
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {variant!r}; expected one of {VARIANTS}")
        self.d = d
        self.variant = variant
        self.gated = variant != "ungated"
        self.gate_bypass = False
        self.query = Linear(d, d, rng, bias=False)
        dtype = T.get_default_dtype()
        if self.gated:
            self.qs = Parameter(np.zeros(d, dtype))
            self.ks = Parameter(np.zeros(d, dtype))
            self.vs = Parameter(np.zeros(d, dtype))
            self.vs_proj = Linear(d, 2 * d, rng) if value_gate_proj else None
        self.q_norm = LayerNorm(d) if norm else None
        self.mem_norm = LayerNorm(d) if norm else None
        self.drop = Dropout(dropout, source)
        self.last_scores_shape: tuple[int, ...] | None = None

    @staticmethod
    def param_count(d: int, variant: str = "gated", value_gate_proj: bool = False, norm: bool = True) -> int:
        n = d * d + (4 * d if norm else 0)
        if variant != "ungated":
            n += 3 * d + (2 * d * d + 2 * d if value_gate_proj else 0)
        return n

    def _gates(self) -> tuple[Tensor | None, Tensor | None, Tensor | None]:
        if not self.gated or self.gate_bypass:
            return None, None, None
        value_gate = T.sigmoid(self.vs)
        if self.vs_proj is not None:
            # fed sigmoid(vs) rather than vs: with vs = 0 at init the projection
            # would otherwise output tanh(0) = 0 and silence the whole head
            proj = self.vs_proj(value_gate.reshape(1, self.d))
            value_gate = (T.sigmoid(proj[:, self.d :]) * T.tanh(proj[:, : self.d])).reshape(self.d)
        return T.sigmoid(self.qs), T.sigmoid(self.ks), value_gate

    def forward(self, h: Tensor, cache: MemoryCache, mem: Tensor | None = None) -> Tensor:
        """Attend from queries ``h [p, B, d]``; keys/values from cache + ``mem`` (default ``h``)."""
        if h.ndim != 3 or h.shape[-1] != self.d:
            raise ShapeError(f"attention expects [p, B, {self.d}] queries, got {h.shape}")
        mem = h if mem is None else mem
        if mem.shape != h.shape:
            raise ShapeError(f"window memory {mem.shape} must match queries {h.shape}")
        steps = h.shape[0]
        qs, ks, vs = self._gates()

        q = (self.q_norm(h) if self.q_norm else h) @ self.query.weight
        if qs is not None:
            q = q * qs

        if self.variant == "mean":
            past = Tensor(mean_condense(cache)[None].astype(mem.dtype, copy=False)) if cache.size else None
        elif cache.size:
            if cache.mem.shape[1:] != mem.shape[1:]:
                raise CacheBatchMismatch(f"cache rows {cache.mem.shape[1:]} vs window rows {mem.shape[1:]}")
            past = Tensor(cache.mem.astype(mem.dtype, copy=False))
        else:
            past = None
        n_past = 0 if past is None else past.shape[0]
        # LN is row-wise, so normalising the constant past separately equals
        # normalising the concatenation, and skips its input gradient
        norm = self.mem_norm if self.mem_norm is not None else (lambda x: x)
        kv = norm(mem) if past is None else T.concat([norm(past), norm(mem)], axis=0)
        k = kv * ks if ks is not None else kv
        v = kv * vs if vs is not None else kv

        qb = q.transpose(1, 0, 2) * (1.0 / math.sqrt(self.d))
        out = attention_core(
            qb, k.transpose(1, 0, 2), v.transpose(1, 0, 2), n_past,
            self.drop.p, self.training, self.drop.source.generator,
        )
        self.last_scores_shape = (h.shape[1], steps, n_past + steps)
        return out.transpose(1, 0, 2)


def attend(h: Tensor, cache: MemoryCache, head: AttentionHead, mem: Tensor | None = None) -> Tensor:
    return head(h, cache, mem)
