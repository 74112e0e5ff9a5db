"""Transformer forward/backward, masking, cache consistency, deterministic init."""

import numpy as np
import pytest

from tinyspec.model import (
    KvCache,
    ModelConfig,
    TransformerWeights,
    _tensor_shapes,
    backward_batch,
    causal_mask,
    forward,
    forward_batch,
    greedy_next,
    init_weights,
    top_k_tokens,
)
from tinyspec.numerics import Parameter, cross_entropy, grad_check

SMALL = ModelConfig(n_layers=2, n_heads=4, d_model=32, d_ff=64, max_positions=64)


def test_config_requires_divisible_heads():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    assert ModelConfig().head_dim == 32


def test_init_is_deterministic_and_shaped():
    a = init_weights(SMALL, seed=7)
    b = init_weights(SMALL, seed=7)
    c = init_weights(SMALL, seed=8)
    shapes = dict(_tensor_shapes(SMALL))
    assert set(a.tensors) == set(shapes)
    for name, arr in a.tensors.items():
        assert arr.shape == shapes[name]
        assert arr.dtype == np.float32
        assert np.array_equal(arr, b.tensors[name])
    assert any(not np.array_equal(a.tensors[n], c.tensors[n]) for n in a.tensors)
    assert np.all(a.tensors["l0.ln1.g"] == 1.0)
    assert np.all(a.tensors["lnf.b"] == 0.0)


def test_state_items_follow_canonical_order():
    w = init_weights(SMALL, seed=0)
    assert [n for n, _ in w.state_items()] == [n for n, _ in _tensor_shapes(SMALL)]
    w64 = w.astype(np.float64)
    assert w64.dtype == np.float64
    assert np.allclose(w64.tensors["wte"], w.tensors["wte"])


def test_causal_mask_layout():
    m = causal_mask(3)
    assert m.shape == (3, 3)
    assert m.tolist() == [[True, False, False], [True, True, False], [True, True, True]]
    mp = causal_mask(2, prefix_len=4)
    assert mp.shape == (2, 6)
    assert mp[:, :4].all()
    assert mp[0, 5] == False  # noqa: E712


def test_greedy_and_topk_tie_break_toward_low_ids():
    row = np.array([1.0, 3.0, 3.0, 0.0, 3.0])
    assert greedy_next(row) == 1
    assert top_k_tokens(row, 4) == [1, 2, 4, 0]


def test_forward_batch_validates_inputs():
    w = init_weights(SMALL, seed=1)
    with pytest.raises(ValueError):
        forward_batch(w, np.zeros(5, dtype=np.int64))
    with pytest.raises(ValueError):
        forward_batch(w, np.zeros((1, SMALL.max_positions + 1), dtype=np.int64))


def test_forward_validates_inputs():
    w = init_weights(SMALL, seed=1)
    toks = np.array([1, 2, 3])
    pos = np.arange(3)
    with pytest.raises(ValueError):
        forward(w, toks, pos, np.zeros((3, 4), dtype=bool))  # wrong mask width
    with pytest.raises(ValueError):
        forward(w, toks, pos, np.zeros((3, 3), dtype=bool))  # starved row
    with pytest.raises(ValueError):
        forward(w, np.array([1, 500, 3]), pos, causal_mask(3))
    with pytest.raises(ValueError):
        forward(w, toks, np.array([0, 1, 99]), causal_mask(3))
    with pytest.raises(ValueError):
        forward(w, np.array([], dtype=np.int64), np.array([], dtype=np.int64), causal_mask(0))


def test_incremental_forward_matches_batch_at_any_split():
    w = init_weights(SMALL, seed=3)
    rng = np.random.default_rng(4)
    seq = rng.integers(0, SMALL.vocab_size, size=21)
    full, _ = forward_batch(w, seq[None, :])
    for split in (1, 7, 20):
        cache = KvCache(SMALL)
        l1, kv = forward(w, seq[:split], np.arange(split), causal_mask(split), cache)
        cache.append(kv)
        rest = len(seq) - split
        l2, _ = forward(
            w, seq[split:], np.arange(split, len(seq)), causal_mask(rest, prefix_len=split), cache
        )
        got = np.concatenate([l1, l2], axis=0)
        assert np.abs(got - full[0]).max() < 1e-4


def test_token_by_token_matches_batch():
    w = init_weights(SMALL, seed=5)
    seq = np.random.default_rng(6).integers(0, SMALL.vocab_size, size=12)
    full, _ = forward_batch(w, seq[None, :])
    cache = KvCache(SMALL)
    rows = []
    for t, tok in enumerate(seq):
        logits, kv = forward(
            w, np.array([tok]), np.array([t]), causal_mask(1, prefix_len=t), cache
        )
        cache.append(kv)
        rows.append(logits[0])
    assert np.abs(np.stack(rows) - full[0]).max() < 1e-4


def test_masked_positions_cannot_leak_information():
    """Changing a token only alters logits at rows allowed to see it."""
    w = init_weights(SMALL, seed=9)
    rng = np.random.default_rng(10)
    seq_a = rng.integers(0, SMALL.vocab_size, size=(1, 15))
    seq_b = seq_a.copy()
    seq_b[0, 10] = (seq_b[0, 10] + 1) % SMALL.vocab_size
    la, _ = forward_batch(w, seq_a)
    lb, _ = forward_batch(w, seq_b)
    assert np.array_equal(la[0, :10], lb[0, :10])  # rows before the edit are untouched bit for bit
    assert not np.array_equal(la[0, 10:], lb[0, 10:])


def test_cache_subset_rows_preserve_semantics():
    """Keeping only chosen rows of a multi-token forward equals having never sent the rest."""
    w = init_weights(SMALL, seed=11)
    rng = np.random.default_rng(12)
    prefix = list(rng.integers(0, 256, size=8))
    extra = list(rng.integers(0, 256, size=4))
    keep = 2  # commit only the first `keep` of the extra tokens

    cache_a = KvCache(SMALL)
    _, kv = forward(w, np.asarray(prefix), np.arange(8), causal_mask(8), cache_a)
    cache_a.append(kv)
    _, kv2 = forward(
        w, np.asarray(extra), np.arange(8, 12), causal_mask(4, prefix_len=8), cache_a
    )
    cache_a.append(kv2, rows=np.arange(keep))

    cache_b = KvCache(SMALL)
    committed = prefix + extra[:keep]
    _, kvb = forward(w, np.asarray(committed), np.arange(10), causal_mask(10), cache_b)
    cache_b.append(kvb)

    probe = np.array([42])
    la, _ = forward(w, probe, np.array([10]), causal_mask(1, prefix_len=10), cache_a)
    lb, _ = forward(w, probe, np.array([10]), causal_mask(1, prefix_len=10), cache_b)
    assert np.abs(la - lb).max() < 1e-4


def test_backward_passes_finite_difference_check():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32, max_positions=32)
    w = init_weights(cfg, seed=3).astype(np.float64)
    toks = np.random.default_rng(0).integers(0, cfg.vocab_size, size=(2, 9))
    labels = np.random.default_rng(1).integers(0, cfg.vocab_size, size=(2, 9))
    params = {n: Parameter(v) for n, v in w.tensors.items()}

    def loss_fn():
        for n, p in params.items():
            w.tensors[n] = p.value
        logits, tape = forward_batch(w, toks, record=True)
        loss, gflat, _ = cross_entropy(logits.reshape(-1, cfg.vocab_size), labels.reshape(-1))
        grads = backward_batch(w, tape, gflat.reshape(logits.shape))
        for n, p in params.items():
            p.grad[...] = grads[n]
        return loss

    err = grad_check(loss_fn, params, epsilon=1e-4, n_coords=120, rng=np.random.default_rng(9))
    assert err < 1e-2


def test_backward_ignores_marked_positions():
    """Gradient contributions vanish for rows whose labels are ignored."""
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32, max_positions=32)
    w = init_weights(cfg, seed=4)
    toks = np.random.default_rng(2).integers(0, cfg.vocab_size, size=(1, 6))
    labels = np.full((1, 6), -1, dtype=np.int64)
    logits, tape = forward_batch(w, toks, record=True)
    _, gflat, count = cross_entropy(logits.reshape(-1, cfg.vocab_size), labels.reshape(-1))
    assert count == 0
    grads = backward_batch(w, tape, gflat.reshape(logits.shape))
    assert all(np.all(g == 0.0) for g in grads.values())
