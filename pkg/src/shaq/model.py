"""Byte-level language model assembled from SHA-RNN or SHAQ blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionHead, MemoryCache, cache_update
from .config import ModelConfig, param_count
from .feedforward import FeedForward, FeedForwardSpec
from .nn import Dropout, Embedding, LayerNorm, Linear, Module, RngSource
from .recurrent import LSTM, QRNN
from .tensor import Parameter, Tensor


def _make_cell(cfg: ModelConfig, rng: np.random.Generator) -> Module:
    if cfg.cell == "lstm":
        return LSTM(cfg.d_model, cfg.d_model, rng)
    return QRNN(cfg.d_model, cfg.d_model, rng, window=cfg.qrnn_window)


def _make_head(cfg: ModelConfig, rng: np.random.Generator, source: RngSource) -> AttentionHead:
    return AttentionHead(
        cfg.d_model, rng, variant=cfg.attn_variant, dropout=cfg.attn_dropout,
        value_gate_proj=cfg.value_gate_proj, norm=cfg.attn_norm, source=source,
    )


class SharnnBlock(Module):
    """LN -> cell -> dropout -> residual, then optional attention and feed-forward sub-blocks.

    Each sub-block is pre-normed with its own LN and added back with dropout.
    The cell's raw output is the attention memory for this window and is what
    gets cached for later windows.
    """

    def __init__(self, cfg: ModelConfig, index: int, rng: np.random.Generator, source: RngSource):
        d = cfg.d_model
        self.norm_in = LayerNorm(d, cfg.ln_eps)
        self.cell = _make_cell(cfg, rng)
        self.drop = Dropout(cfg.dropout, source)
        n_heads = cfg.heads_in(index)
        self.attn_norms = [LayerNorm(d, cfg.ln_eps) for _ in range(n_heads)]
        self.heads = [_make_head(cfg, rng, source) for _ in range(n_heads)]
        self.ff_norm = LayerNorm(d, cfg.ln_eps) if cfg.ff_kind != "none" else None
        self.ff = FeedForward(FeedForwardSpec(cfg.ff_kind, d, cfg.d_inner), rng) if cfg.ff_kind != "none" else None

    @property
    def attends(self) -> bool:
        return bool(self.heads)

    def forward(self, x: Tensor, state, cache: MemoryCache | None):
        a = self.norm_in(x)
        y, state = self.cell(a, state)
        s = a + self.drop(y)
        for norm, head in zip(self.attn_norms, self.heads):
            s = s + self.drop(head(norm(s), cache, mem=y))
        if self.heads:
            cache = cache_update(cache, y.data)
        if self.ff is not None:
            s = s + self.drop(self.ff(self.ff_norm(s)))
        return s, state, cache


class ShaqBlock(Module):
    """LN1 -> QRNN -> dropout -> + LN1 output -> LN2 -> LN3 -> ungated attention -> dropout -> residual."""

    def __init__(self, cfg: ModelConfig, index: int, rng: np.random.Generator, source: RngSource):
        d = cfg.d_model
        self.norm_in = LayerNorm(d, cfg.ln_eps)
        self.cell = _make_cell(cfg, rng)
        self.drop = Dropout(cfg.dropout, source)
        n_heads = cfg.heads_in(index)
        self.pre_norms = [LayerNorm(d, cfg.ln_eps) for _ in range(n_heads)]
        self.post_norms = [LayerNorm(d, cfg.ln_eps) for _ in range(n_heads)]
        self.heads = [_make_head(cfg, rng, source) for _ in range(n_heads)]

    @property
    def attends(self) -> bool:
        return bool(self.heads)

    def forward(self, x: Tensor, state, cache: MemoryCache | None):
        a = self.norm_in(x)
        y, state = self.cell(a, state)
        s = a + self.drop(y)
        for first, second, head in zip(self.pre_norms, self.post_norms, self.heads):
            s = s + self.drop(head(second(first(s)), cache, mem=y))
        if self.heads:
            cache = cache_update(cache, y.data)
        return s, state, cache


def block_forward_sharnn(x, state, cache, block: SharnnBlock):
    return block(x, state, cache)


def block_forward_shaq(x, state, cache, block: ShaqBlock):
    return block(x, state, cache)


@dataclass
class ForwardState:
    """Recurrent state and attention cache per block (cache is None for non-attending blocks)."""

    states: list
    caches: list

    def detach(self) -> ForwardState:
        return ForwardState([s.detach() for s in self.states], list(self.caches))


class Model(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.dropout_source = RngSource([seed, 1])
        block_cls = SharnnBlock if cfg.wiring == "sharnn" else ShaqBlock
        self.embed = Embedding(cfg.vocab, cfg.d_model, rng)
        self.emb_drop = Dropout(cfg.emb_dropout, self.dropout_source)
        self.blocks = [block_cls(cfg, i + 1, rng, self.dropout_source) for i in range(cfg.n_blocks)]
        self.final_norm = LayerNorm(cfg.d_model, cfg.ln_eps)
        if cfg.tie_embeddings:
            self.out_bias = Parameter(np.zeros(cfg.vocab, dtype=T.get_default_dtype()))
        else:
            self.head = Linear(cfg.d_model, cfg.vocab, rng)

    @property
    def dtype(self) -> np.dtype:
        return self.embed.weight.dtype

    def initial_state(self, batch: int) -> ForwardState:
        return ForwardState(
            [b.cell.initial_state(batch) for b in self.blocks],
            [MemoryCache(self.cfg.cache_cap) if b.attends else None for b in self.blocks],
        )

    def forward(self, ids: np.ndarray, fstate: ForwardState | None = None) -> tuple[Tensor, ForwardState]:
        """Logits ``[p, B, vocab]`` for byte ids ``[p, B]``; the returned state is detached."""
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError(f"expected [p, B] byte ids, got shape {ids.shape}")
        if fstate is None:
            fstate = self.initial_state(ids.shape[1])
        x = self.emb_drop(self.embed(ids))
        states, caches = [], []
        for block, state, cache in zip(self.blocks, fstate.states, fstate.caches):
            x, state, cache = block(x, state, cache)
            states.append(state)
            caches.append(cache)
        h = self.final_norm(x)
        if self.cfg.tie_embeddings:
            logits = h @ self.embed.weight.transpose(1, 0) + self.out_bias
        else:
            logits = self.head(h)
        return logits, ForwardState(states, caches).detach()

    def reseed_dropout(self, seed) -> None:
        self.dropout_source.reseed(seed)

    def param_breakdown(self) -> dict[str, int]:
        return param_count(self.cfg)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=None) -> Model:
    """Deterministically initialise a model; ``dtype`` defaults to the current default."""
    cfg.validate()
    if dtype is None:
        return Model(cfg, seed)
    with T.default_dtype(dtype):
        return Model(cfg, seed)


def model_forward(model: Model, ids: np.ndarray, fstate: ForwardState | None = None):
    return model(ids, fstate)
