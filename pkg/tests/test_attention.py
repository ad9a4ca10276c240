import math

import numpy as np
import pytest

from shaq.attention import (
    AttentionHead,
    CacheBatchMismatch,
    MemoryCache,
    attend,
    attention_core,
    build_kv_mean,
    cache_update,
    causal_mask,
    mean_condense,
)
from shaq.gradcheck import finite_diff_check
from shaq.tensor import ShapeError, Tensor


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def ln(x, gamma, beta, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def randomise(head, rng):
    for p in head.parameters():
        p.data = p.data + 0.5 * rng.standard_normal(p.shape)


def loop_oracle(head, h, mem, cache_rows):
    """Per batch element, per query position: build the visible keys and sum explicitly."""
    p, batch, d = h.shape
    out = np.zeros_like(h)
    qn, mn = head.q_norm, head.mem_norm
    for b in range(batch):
        if head.variant == "mean":
            past = [cache_rows[:, b].mean(axis=0)] if cache_rows is not None else []
        else:
            past = list(cache_rows[:, b]) if cache_rows is not None else []
        for i in range(p):
            q = ln(h[i, b], qn.weight.data, qn.bias.data) @ head.query.weight.data
            rows = [ln(r, mn.weight.data, mn.bias.data) for r in past + [mem[j, b] for j in range(i + 1)]]
            keys, vals = np.array(rows), np.array(rows)
            if head.gated:
                q = q * sigmoid(head.qs.data)
                keys = keys * sigmoid(head.ks.data)
                if head.vs_proj is None:
                    vgate = sigmoid(head.vs.data)
                else:
                    proj = sigmoid(head.vs.data) @ head.vs_proj.weight.data + head.vs_proj.bias.data
                    vgate = sigmoid(proj[d:]) * np.tanh(proj[:d])
                vals = vals * vgate
            scores = np.array([q @ k for k in keys]) / math.sqrt(d)
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            out[i, b] = sum(w * v for w, v in zip(weights, vals))
    return out


# -- cache ---------------------------------------------------------------------


def test_cache_update_grows_then_rolls(rng):
    cache = MemoryCache(cap=6)
    a = rng.standard_normal((4, 2, 3))
    cache = cache_update(cache, a)
    assert cache.size == 4
    b = rng.standard_normal((4, 2, 3))
    cache = cache_update(cache, b)
    assert cache.size == 6
    np.testing.assert_array_equal(cache.mem, np.concatenate([a, b])[-6:])


def test_cache_sequential_updates_equal_one_concatenation(rng):
    chunks = [rng.standard_normal((n, 2, 3)) for n in (3, 5, 2)]
    cache = MemoryCache(cap=7)
    for c in chunks:
        cache = cache_update(cache, c)
    direct = cache_update(MemoryCache(cap=7), np.concatenate(chunks))
    np.testing.assert_array_equal(cache.mem, direct.mem)


def test_cache_is_a_detached_copy(rng):
    mem = Tensor(rng.standard_normal((2, 1, 3)), requires_grad=True)
    cache = cache_update(MemoryCache(5), mem)
    assert isinstance(cache.mem, np.ndarray) and not np.shares_memory(cache.mem, mem.data)


def test_cache_batch_change_is_signalled(rng):
    cache = cache_update(MemoryCache(5), rng.standard_normal((2, 2, 3)))
    with pytest.raises(CacheBatchMismatch):
        cache_update(cache, rng.standard_normal((2, 3, 3)))
    assert cache.reset().size == 0


def test_mean_condense_examples(rng):
    v = rng.standard_normal((2, 3))
    same = cache_update(MemoryCache(10), np.stack([v] * 4))
    np.testing.assert_allclose(mean_condense(same), v, atol=1e-15)
    u = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(mean_condense(cache_update(MemoryCache(10), np.stack([u, -u]))), 0.0)
    rows = rng.standard_normal((7, 2, 3))
    direct = sum(rows[i] for i in range(7)) / 7
    assert np.max(np.abs(mean_condense(cache_update(MemoryCache(10), rows)) - direct)) < 1e-12
    with pytest.raises(ValueError):
        mean_condense(MemoryCache(10))


def test_build_kv_mean_layout(rng):
    w = rng.standard_normal((2, 3))
    h = Tensor(rng.standard_normal((4, 2, 3)))
    z = build_kv_mean(w, h)
    assert z.shape == (5, 2, 3)
    np.testing.assert_array_equal(z.data[0], w)
    np.testing.assert_array_equal(z.data[1:], h.data)
    assert build_kv_mean(None, h) is h
    empty = Tensor(np.zeros((0, 2, 3)))
    np.testing.assert_array_equal(build_kv_mean(w, empty).data, w[None])
    with pytest.raises(ShapeError):
        build_kv_mean(rng.standard_normal((2, 4)), h)


# -- attention core ------------------------------------------------------------


def test_core_weights_are_causal_distributions(rng):
    n_past, p = 3, 4
    n = n_past + p
    q = Tensor(rng.standard_normal((1, p, 5)))
    k = Tensor(rng.standard_normal((1, n, 5)))
    eye = Tensor(np.eye(n)[None])  # values = identity, so the output rows are the weights
    weights = attention_core(q, k, eye, n_past).data[0]
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-6)
    mask = causal_mask(p, n_past)
    assert np.all(weights[mask] == 0.0)
    assert np.all(weights[~mask] > 0.0)


def test_core_identical_keys_give_uniform_weights(rng):
    n_past, p = 2, 3
    n = n_past + p
    q = Tensor(rng.standard_normal((1, p, 4)))
    k = Tensor(np.tile(rng.standard_normal(4), (1, n, 1)))
    weights = attention_core(q, k, Tensor(np.eye(n)[None]), n_past).data[0]
    for i in range(p):
        visible = n_past + i + 1
        np.testing.assert_allclose(weights[i, :visible], 1.0 / visible, atol=1e-15)


def test_core_dropout_needs_rng_and_bounds(rng):
    q = Tensor(rng.standard_normal((1, 2, 3)))
    k = Tensor(rng.standard_normal((1, 2, 3)))
    with pytest.raises(ValueError):
        attention_core(q, k, k, 0, p_drop=0.5, training=True)
    with pytest.raises(ValueError):
        attention_core(q, k, k, 0, p_drop=1.0)
    with pytest.raises(ShapeError):
        attention_core(q, k, k, 1)


# -- heads ---------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["gated", "ungated", "mean"])
@pytest.mark.parametrize("proj", [False, True])
def test_head_matches_loop_oracle(rng, variant, proj):
    head = AttentionHead(4, rng, variant=variant, dropout=0.0, value_gate_proj=proj)
    randomise(head, rng)
    h = rng.standard_normal((3, 2, 4))
    mem = rng.standard_normal((3, 2, 4))
    cache_rows = rng.standard_normal((2, 2, 4))
    cache = cache_update(MemoryCache(10), cache_rows)
    got = attend(Tensor(h), cache, head, mem=Tensor(mem)).data
    assert np.max(np.abs(got - loop_oracle(head, h, mem, cache_rows))) < 1e-10
    got_empty = head(Tensor(h), MemoryCache(10)).data
    assert np.max(np.abs(got_empty - loop_oracle(head, h, h, None))) < 1e-10


def test_single_candidate_returns_the_gated_value(rng):
    head = AttentionHead(4, rng, variant="gated", dropout=0.0)
    randomise(head, rng)
    h = rng.standard_normal((1, 2, 4))
    out = head(Tensor(h), MemoryCache(5)).data
    value = ln(h, head.mem_norm.weight.data, head.mem_norm.bias.data)
    np.testing.assert_allclose(out, sigmoid(head.vs.data) * value, atol=1e-12)
    ungated = AttentionHead(4, rng, variant="ungated", dropout=0.0)
    np.testing.assert_allclose(ungated(Tensor(h), MemoryCache(5)).data, ln(h, 1.0, 0.0), atol=1e-12)


def test_gate_bypass_reduces_gated_to_ungated(rng):
    gated = AttentionHead(4, np.random.default_rng(7), variant="gated", dropout=0.0, value_gate_proj=True)
    ungated = AttentionHead(4, np.random.default_rng(7), variant="ungated", dropout=0.0)
    gated.qs.data += 3.0  # bypass must override whatever the gates hold
    gated.gate_bypass = True
    h = Tensor(rng.standard_normal((5, 2, 4)))
    cache = cache_update(MemoryCache(10), rng.standard_normal((3, 2, 4)))
    np.testing.assert_array_equal(gated(h, cache).data, ungated(h, cache).data)


@pytest.mark.parametrize("variant", ["gated", "ungated", "mean"])
def test_head_is_causal_across_the_cache_boundary(rng, variant):
    head = AttentionHead(4, rng, variant=variant, dropout=0.0, value_gate_proj=True)
    randomise(head, rng)
    cache = cache_update(MemoryCache(10), rng.standard_normal((4, 2, 4)))
    h = rng.standard_normal((6, 2, 4))
    base = head(Tensor(h), cache).data
    for t in range(6):
        bumped = h.copy()
        bumped[t:] += rng.standard_normal(bumped[t:].shape)
        np.testing.assert_array_equal(head(Tensor(bumped), cache).data[:t], base[:t])


def test_mean_variant_score_matrix_is_p_by_p_plus_one(rng):
    cache = cache_update(MemoryCache(100), rng.standard_normal((40, 2, 4)))
    h = Tensor(rng.standard_normal((5, 2, 4)))
    mean_head = AttentionHead(4, rng, variant="mean", dropout=0.0)
    full_head = AttentionHead(4, rng, variant="gated", dropout=0.0)
    mean_head(h, cache)
    full_head(h, cache)
    assert mean_head.last_scores_shape == (2, 5, 6)
    assert full_head.last_scores_shape == (2, 5, 45)


def test_gates_absent_when_ungated(rng):
    names = {n for n, _ in AttentionHead(4, rng, variant="ungated").named_parameters()}
    assert not names & {"qs", "ks", "vs"}
    assert {"qs", "ks", "vs"} <= {n for n, _ in AttentionHead(4, rng, variant="gated").named_parameters()}


@pytest.mark.parametrize("variant,proj", [("gated", False), ("gated", True), ("ungated", False), ("mean", True)])
def test_param_count_matches_registry(rng, variant, proj):
    head = AttentionHead(6, rng, variant=variant, value_gate_proj=proj)
    assert head.num_parameters() == AttentionHead.param_count(6, variant, proj)


def test_train_mode_dropout_changes_output_eval_does_not(rng):
    head = AttentionHead(4, rng, variant="ungated", dropout=0.5)
    h = Tensor(rng.standard_normal((6, 2, 4)))
    cache = MemoryCache(10)
    head.eval()
    a, b = head(h, cache).data, head(h, cache).data
    np.testing.assert_array_equal(a, b)
    head.train()
    assert not np.array_equal(head(h, cache).data, a)


def test_shape_errors(rng):
    head = AttentionHead(4, rng)
    with pytest.raises(ShapeError):
        head(Tensor(np.zeros((3, 2, 5))), MemoryCache(5))
    with pytest.raises(ShapeError):
        head(Tensor(np.zeros((3, 2, 4))), MemoryCache(5), mem=Tensor(np.zeros((2, 2, 4))))
    with pytest.raises(ValueError):
        AttentionHead(4, rng, variant="multihead")


@pytest.mark.parametrize("variant", ["gated", "ungated", "mean"])
@pytest.mark.parametrize("seed", range(5))
def test_attention_gradients(variant, seed):
    rng = np.random.default_rng(seed)
    head = AttentionHead(4, rng, variant=variant, dropout=0.0, value_gate_proj=variant != "ungated")
    randomise(head, rng)
    h = Tensor(rng.standard_normal((3, 2, 4)), requires_grad=True)
    mem = Tensor(rng.standard_normal((3, 2, 4)), requires_grad=True)
    cache = cache_update(MemoryCache(10), rng.standard_normal((2, 2, 4)))
    w = Tensor(rng.standard_normal((3, 2, 4)))
    assert finite_diff_check(lambda: (head(h, cache, mem=mem) * w).sum(), [h, mem, *head.parameters()]) < 1e-4
