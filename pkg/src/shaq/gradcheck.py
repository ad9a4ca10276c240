"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int = 24,
    seed: int = 0,
) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``f`` must rebuild its graph on each call and be deterministic.  Up to
    ``max_coords`` coordinates per tensor are sampled; tensors must be float64
    for the result to be meaningful at the 1e-4 level.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else np.array(p.grad, copy=True) for p in params]

    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)  # view: perturbations write through
            if not np.shares_memory(flat, p.data):
                raise ValueError("finite_diff_check needs contiguous parameter storage")
            n = flat.size
            coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
            gflat = grad.reshape(-1)
            for i in coords:
                original = flat[i]
                flat[i] = original + eps
                plus = float(f().data)
                flat[i] = original - eps
                minus = float(f().data)
                flat[i] = original
                numeric = (plus - minus) / (2 * eps)
                a = float(gflat[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Component suite (float64, toy dimensions)
# ---------------------------------------------------------------------------

SUITE_COMPONENTS = (
    "linear", "layer_norm", "gelu", "softmax", "embedding", "cross_entropy",
    "lstm", "qrnn", "attention_gated", "attention_ungated", "attention_mean",
    "boom", "fc", "sharnn_block", "shaq_block",
)


def _randomise(params, rng: np.random.Generator, scale: float = 0.5) -> None:
    for p in params:
        p.data = (p.data + scale * rng.standard_normal(p.shape)).astype(np.float64)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights)).sum()


def _component_case(name: str, seed: int, steps: int = 4, batch: int = 2, d: int = 6):
    """Build ``(loss_fn, params)`` for one named component at toy size."""
    from . import tensor as T
    from .attention import AttentionHead, MemoryCache, cache_update
    from .config import ModelConfig
    from .feedforward import FeedForward, FeedForwardSpec
    from .model import ShaqBlock, SharnnBlock
    from .nn import Embedding, LayerNorm, Linear, RngSource
    from .recurrent import LSTM, QRNN

    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((steps, batch, d)), requires_grad=True)
    w_out = rng.standard_normal((steps, batch, d))

    def cache_of(n: int) -> MemoryCache:
        return cache_update(MemoryCache(16), rng.standard_normal((n, batch, d)))

    if name == "linear":
        m = Linear(d, d, rng)
        _randomise(m.parameters(), rng)
        return (lambda: _weighted_sum(m(x), w_out)), [x, *m.parameters()]
    if name == "layer_norm":
        m = LayerNorm(d)
        _randomise(m.parameters(), rng)
        return (lambda: _weighted_sum(m(x), w_out)), [x, *m.parameters()]
    if name == "gelu":
        return (lambda: _weighted_sum(T.gelu(x), w_out)), [x]
    if name == "softmax":
        return (lambda: _weighted_sum(T.softmax(x, axis=-1), w_out)), [x]
    if name == "embedding":
        m = Embedding(11, d, rng, std=1.0)
        ids = rng.integers(0, 11, size=(steps, batch))
        return (lambda: _weighted_sum(m(ids), w_out)), m.parameters()
    if name == "cross_entropy":
        logits = Tensor(rng.standard_normal((steps, batch, 9)), requires_grad=True)
        targets = rng.integers(0, 9, size=(steps, batch))
        return (lambda: T.cross_entropy_logits(logits, targets)), [logits]
    if name == "lstm":
        m = LSTM(d, d, rng)
        _randomise(m.parameters(), rng, 0.3)
        h0 = Tensor(rng.standard_normal((batch, d)), requires_grad=True)
        c0 = Tensor(rng.standard_normal((batch, d)), requires_grad=True)
        from .recurrent import LstmState
        return (lambda: _weighted_sum(m(x, LstmState(h0, c0))[0], w_out)), [x, h0, c0, *m.parameters()]
    if name == "qrnn":
        m = QRNN(d, d, rng, window=2)
        _randomise(m.parameters(), rng, 0.3)
        state = m.initial_state(batch)
        state.tail[...] = rng.standard_normal(state.tail.shape)
        c0 = Tensor(rng.standard_normal((batch, d)), requires_grad=True)
        from .recurrent import QrnnState
        return (lambda: _weighted_sum(m(x, QrnnState(c0, state.tail))[0], w_out)), [x, c0, *m.parameters()]
    if name.startswith("attention_"):
        variant = name.split("_", 1)[1]
        head = AttentionHead(d, rng, variant=variant, dropout=0.0, value_gate_proj=variant != "ungated")
        _randomise(head.parameters(), rng)
        mem = Tensor(rng.standard_normal((steps, batch, d)), requires_grad=True)
        cache = cache_of(5)
        return (lambda: _weighted_sum(head(x, cache, mem=mem), w_out)), [x, mem, *head.parameters()]
    if name in ("boom", "fc"):
        m = FeedForward(FeedForwardSpec(name, d, 2 * d), rng)
        _randomise(m.parameters(), rng)
        return (lambda: _weighted_sum(m(x), w_out)), [x, *m.parameters()]
    if name in ("sharnn_block", "shaq_block"):
        if name == "sharnn_block":
            cfg = ModelConfig(d_model=d, n_blocks=1, cell="lstm", wiring="sharnn", attn_layers=(1,),
                              attn_variant="gated", ff_kind="boom", ff_inner=2 * d, dropout=0.0,
                              attn_dropout=0.0, window=5, mem_total=21)
            block = SharnnBlock(cfg, 1, rng, RngSource(seed))
        else:
            cfg = ModelConfig(d_model=d, n_blocks=1, cell="qrnn", wiring="shaq", attn_layers=(1,),
                              attn_variant="ungated", ff_kind="none", dropout=0.0, attn_dropout=0.0,
                              window=5, mem_total=21)
            block = ShaqBlock(cfg, 1, rng, RngSource(seed))
        _randomise(block.parameters(), rng, 0.3)
        state = block.cell.initial_state(batch)
        cache = cache_of(3)
        return (lambda: _weighted_sum(block(x, state, cache)[0], w_out)), [x, *block.parameters()]
    raise KeyError(f"unknown gradcheck component {name!r}")


def component_suite(seeds: Sequence[int] = (0, 1, 2, 3, 4), components: Sequence[str] = SUITE_COMPONENTS,
                    max_coords: int = 12) -> dict[str, float]:
    """Worst relative error per component over ``seeds``, computed in float64."""
    from . import tensor as T

    results = {}
    with T.default_dtype(np.float64):
        for name in components:
            worst = 0.0
            for seed in seeds:
                fn, params = _component_case(name, seed)
                worst = max(worst, finite_diff_check(fn, params, eps=1e-6, max_coords=max_coords, seed=seed))
            results[name] = worst
    return results
