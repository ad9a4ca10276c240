"""Model configuration, the closed-form parameter counter, and named presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

CELLS = ("lstm", "qrnn")
WIRINGS = ("sharnn", "shaq")
ATTN_VARIANTS = ("gated", "ungated", "mean")
FF_KINDS = ("boom", "fc", "none")
MIN_WINDOW = 5


class ConfigError(ValueError):
    """A configuration violates one of its constraints."""


@dataclass(frozen=True)
class ModelConfig:
    """Every architecture axis of the ablation study.

    ``attn_layers`` holds 1-based block indices; an index repeated ``k`` times
    stacks ``k`` single-headed attention sub-blocks in that block.  ``window``
    is the training window length ``p``; the attention cache keeps at most
    ``mem_total - window`` past steps.
    """

    vocab: int = 256
    d_model: int = 256
    n_blocks: int = 2
    cell: str = "qrnn"
    qrnn_window: int = 2
    wiring: str = "shaq"
    attn_layers: tuple[int, ...] = (2,)
    attn_variant: str = "ungated"
    value_gate_proj: bool = True
    attn_norm: bool = True
    ff_kind: str = "none"
    ff_inner: int | None = None
    dropout: float = 0.1
    attn_dropout: float = 0.1
    emb_dropout: float = 0.0
    window: int = 256
    mem_total: int = 5000
    tie_embeddings: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "attn_layers", tuple(int(i) for i in self.attn_layers))
        self.validate()

    @property
    def d_inner(self) -> int:
        return self.ff_inner if self.ff_inner is not None else 4 * self.d_model

    @property
    def cache_cap(self) -> int:
        return self.mem_total - self.window

    def validate(self) -> None:
        def need(ok: bool, msg: str):
            if not ok:
                raise ConfigError(msg)

        need(self.vocab > 0, f"vocab must be positive, got {self.vocab}")
        need(self.d_model > 0, f"d_model must be positive, got {self.d_model}")
        need(self.n_blocks >= 1, f"n_blocks must be >= 1, got {self.n_blocks}")
        need(self.cell in CELLS, f"cell must be one of {CELLS}, got {self.cell!r}")
        need(self.qrnn_window >= 1, f"qrnn_window must be >= 1, got {self.qrnn_window}")
        need(self.wiring in WIRINGS, f"wiring must be one of {WIRINGS}, got {self.wiring!r}")
        need(self.attn_variant in ATTN_VARIANTS, f"attn_variant must be one of {ATTN_VARIANTS}, got {self.attn_variant!r}")
        need(self.ff_kind in FF_KINDS, f"ff_kind must be one of {FF_KINDS}, got {self.ff_kind!r}")
        bad = [i for i in self.attn_layers if not 1 <= i <= self.n_blocks]
        need(not bad, f"attn_layers must lie in 1..{self.n_blocks}, got {list(self.attn_layers)}")
        need(self.window >= MIN_WINDOW, f"window must be >= {MIN_WINDOW}, got {self.window}")
        need(self.mem_total > self.window, f"mem_total ({self.mem_total}) must exceed window ({self.window})")
        need(self.wiring != "shaq" or self.ff_kind == "none", "shaq wiring has no feed-forward; set ff_kind='none'")
        if self.ff_kind == "boom":
            need(self.d_inner % self.d_model == 0,
                 f"boom needs ff_inner divisible by d_model, got {self.d_inner} / {self.d_model}")
        for name in ("dropout", "attn_dropout", "emb_dropout"):
            p = getattr(self, name)
            need(0.0 <= p < 1.0, f"{name} must lie in [0, 1), got {p}")

    def heads_in(self, block: int) -> int:
        """Number of attention sub-blocks in 1-based ``block``."""
        return self.attn_layers.count(block)

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["attn_layers"] = list(self.attn_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def param_count(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form parameter counts per component, plus ``total``."""
    d, v = cfg.d_model, cfg.vocab
    if cfg.cell == "lstm":
        per_cell = 4 * (d * d + d * d + d)
    else:
        per_cell = 3 * (cfg.qrnn_window * d * d + d)

    per_head = d * d
    if cfg.attn_norm:
        per_head += 4 * d
    if cfg.attn_variant != "ungated":
        per_head += 3 * d
        if cfg.value_gate_proj:
            per_head += 2 * d * d + 2 * d
    heads = len(cfg.attn_layers)

    if cfg.ff_kind == "none":
        per_ff = 0
    else:
        per_ff = d * cfg.d_inner + cfg.d_inner
        if cfg.ff_kind == "fc":
            per_ff += cfg.d_inner * d + d

    ln = 2 * d
    if cfg.wiring == "sharnn":
        norms = cfg.n_blocks * ln + heads * ln + (cfg.n_blocks * ln if cfg.ff_kind != "none" else 0)
    else:
        norms = cfg.n_blocks * ln + heads * 2 * ln
    norms += ln  # final norm

    counts = {
        "embedding": v * d,
        "output": v if cfg.tie_embeddings else d * v + v,
        "cells": cfg.n_blocks * per_cell,
        "attention": heads * per_head,
        "feedforward": cfg.n_blocks * per_ff,
        "norms": norms,
    }
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def sharnn_config(d_model: int = 1024, **overrides) -> ModelConfig:
    """The four-block LSTM baseline with one gated head on block 3 and Boom layers."""
    base = dict(d_model=d_model, n_blocks=4, cell="lstm", wiring="sharnn", attn_layers=(3,),
                attn_variant="gated", ff_kind="boom")
    base.update(overrides)
    return ModelConfig(**base)


def shaq_config(d_model: int = 1024, **overrides) -> ModelConfig:
    """Four QRNN blocks, ungated attention on the last one, no feed-forward."""
    base = dict(d_model=d_model, n_blocks=4, cell="qrnn", qrnn_window=2, wiring="shaq",
                attn_layers=(4,), attn_variant="ungated", ff_kind="none")
    base.update(overrides)
    return ModelConfig(**base)


def table1_configs(d_model: int = 1024, **overrides) -> dict[str, ModelConfig]:
    base = sharnn_config(d_model, **overrides)
    return {
        "Baseline": base,
        "Removed Boom": base.replace(ff_kind="none"),
        "Replace Boom with FC": base.replace(ff_kind="fc"),
        "QRNN (w=2)": base.replace(cell="qrnn", qrnn_window=2),
        "Mean Attention": base.replace(attn_variant="mean"),
        "Removal of Qs,Ks,Vs": base.replace(attn_variant="ungated"),
    }


TABLE2_LAYOUTS: dict[str, tuple[int, tuple[int, ...]]] = {
    "4 layer (1)": (4, (1,)),
    "4 layer (2)": (4, (2,)),
    "4 layer (3) base": (4, (3,)),
    "4 Layer (4)": (4, (4,)),
    "3 Layer (3,3)": (3, (3, 3)),
    "2 Layer (2,2)": (2, (2, 2)),
    "2 Layer (2)": (2, (2,)),
}


def table2_configs(d_model: int = 1024, **overrides) -> dict[str, ModelConfig]:
    base = sharnn_config(d_model, **overrides)
    return {label: base.replace(n_blocks=n, attn_layers=layers) for label, (n, layers) in TABLE2_LAYOUTS.items()}


def toy_shaq_config(**overrides) -> ModelConfig:
    """Desk-scale SHAQ: d=256, two QRNN blocks, ungated attention on the last."""
    base = dict(d_model=256, n_blocks=2, cell="qrnn", qrnn_window=2, wiring="shaq",
                attn_layers=(2,), attn_variant="ungated", ff_kind="none", window=256)
    base.update(overrides)
    return ModelConfig(**base)


def toy_sharnn_config(**overrides) -> ModelConfig:
    """Desk-scale LSTM baseline with the same width and depth as ``toy_shaq_config``."""
    base = dict(d_model=256, n_blocks=2, cell="lstm", wiring="sharnn", attn_layers=(2,),
                attn_variant="gated", ff_kind="boom", window=256)
    base.update(overrides)
    return ModelConfig(**base)
