import tracemalloc

import numpy as np
import pytest

from jano.dit import KVCacheStore, ToyDiT, cache_memory_report, full_forward, masked_forward
from jano.errors import InvalidInputError, InvalidStateError, NumericError

from oracles import dense_mlp_only, dense_stale_forward

C = 8


@pytest.fixture(scope="module")
def model():
    return ToyDiT(C, d_model=32, n_heads=4, n_layers=3, seed=5)


def tokens(n, seed=0):
    return np.random.default_rng(seed).standard_normal((n, C)).astype(np.float32)


def test_single_token_is_mlp_path(model):
    x = tokens(1)
    np.testing.assert_allclose(full_forward(model, x, 0.3), dense_mlp_only(model, x[0], 0.3), atol=1e-5)


def test_permutation_equivariance(model):
    x = tokens(50, 1)
    perm = np.random.default_rng(2).permutation(50)
    a = full_forward(model, x, 0.6)
    b = full_forward(model, x[perm], 0.6)
    np.testing.assert_allclose(b[np.argsort(perm)], a, atol=1e-5)


def test_determinism():
    x = tokens(20, 3)
    a = full_forward(ToyDiT(C, 32, 4, 2, seed=9), x, 0.1)
    b = full_forward(ToyDiT(C, 32, 4, 2, seed=9), x, 0.1)
    assert a.tobytes() == b.tobytes()


def test_full_forward_matches_dense_oracle(model):
    x = tokens(64, 4)
    ref, _ = dense_stale_forward(model, x, 0.25, np.arange(64))
    np.testing.assert_allclose(full_forward(model, x, 0.25), ref, atol=1e-5)


def test_input_validation(model):
    with pytest.raises(InvalidInputError):
        full_forward(model, np.zeros((4, C + 1)), 0.1)
    with pytest.raises(InvalidInputError):
        full_forward(model, np.zeros((0, C)), 0.1)
    bad = tokens(3)
    bad[1, 2] = np.inf
    with pytest.raises(NumericError):
        full_forward(model, bad, 0.1)
    with pytest.raises(InvalidInputError):
        ToyDiT(C, d_model=30, n_heads=4)


def test_all_active_with_empty_cache_equals_full(model):
    x = tokens(40, 5)
    cache = KVCacheStore(model.n_layers, model.d_model)
    ids = np.arange(40)
    out = masked_forward(model, x, ids, cache, 0.4, num_tokens=40)
    np.testing.assert_allclose(out, full_forward(model, x, 0.4), atol=1e-5)


def test_fresh_cache_reproduces_full_forward(model):
    x = tokens(80, 6)
    levels = np.where(np.random.default_rng(7).random(80) < 0.5, 1, 3).astype(np.int8)
    cache = KVCacheStore(model.n_layers, model.d_model)
    full = full_forward(model, x, 0.5, cache, levels, 1)
    act = np.flatnonzero(levels == 3)
    out = masked_forward(model, x[act], act, cache, 0.5, num_tokens=80, token_levels=levels)
    np.testing.assert_allclose(out, full[act], atol=1e-5)


def test_stale_cache_matches_substitution_oracle(model):
    N = 96
    x_old, x_new = tokens(N, 8), tokens(N, 9)
    levels = np.where(np.random.default_rng(10).random(N) < 0.6, 1, 3).astype(np.int8)
    cache = KVCacheStore(model.n_layers, model.d_model)
    full_forward(model, x_old, 0.2, cache, levels, 1)
    act = np.flatnonzero(levels == 3)
    frz = np.flatnonzero(levels == 1)
    out = masked_forward(model, x_new[act], act, cache, 0.45, num_tokens=N, token_levels=levels)
    _, kv_old = dense_stale_forward(model, x_old, 0.2, np.arange(N))
    sub = {li: (frz, k[frz], v[frz]) for li, (k, v) in enumerate(kv_old)}
    ref, _ = dense_stale_forward(model, x_new, 0.45, act, sub)
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_two_level_staleness_chain(model):
    """Level 1 cached at step 1, level 2 refreshed at step 2, only level 3 computed at step 3."""
    N = 90
    rng = np.random.default_rng(11)
    levels = rng.integers(1, 4, N).astype(np.int8)
    xs = [tokens(N, 20 + i) for i in range(3)]
    ts = [0.1, 0.2, 0.3]
    l1, l2, l3 = (np.flatnonzero(levels == k) for k in (1, 2, 3))
    cache = KVCacheStore(model.n_layers, model.d_model)
    full_forward(model, xs[0], ts[0], cache, levels, 1)
    a2 = np.sort(np.concatenate([l2, l3]))
    out2 = masked_forward(model, xs[1][a2], a2, cache, ts[1], num_tokens=N, token_levels=levels, step=2)
    out3 = masked_forward(model, xs[2][l3], l3, cache, ts[2], num_tokens=N, token_levels=levels, step=3)

    _, kv1 = dense_stale_forward(model, xs[0], ts[0], np.arange(N))
    sub2 = {li: (l1, k[l1], v[l1]) for li, (k, v) in enumerate(kv1)}
    ref2, kv2 = dense_stale_forward(model, xs[1], ts[1], a2, sub2)
    np.testing.assert_allclose(out2, ref2, atol=1e-5)
    frz = np.concatenate([l1, l2])
    sub3 = {li: (frz, np.concatenate([kv1[li][0][l1], kv2[li][0][l2]]),
                 np.concatenate([kv1[li][1][l1], kv2[li][1][l2]])) for li in range(model.n_layers)}
    ref3, _ = dense_stale_forward(model, xs[2], ts[2], l3, sub3)
    np.testing.assert_allclose(out3, ref3, atol=1e-5)
    assert cache.entries[0][1]["step"] == 1 and cache.entries[0][2]["step"] == 2


def test_concatenation_order_is_irrelevant(model):
    N = 60
    levels = np.random.default_rng(12).integers(1, 4, N).astype(np.int8)
    x = tokens(N, 13)
    cache = KVCacheStore(model.n_layers, model.d_model)
    full_forward(model, x, 0.3, cache, levels, 1)
    act = np.flatnonzero(levels == 3)
    a = masked_forward(model, x[act], act, cache, 0.35, N, levels, order=(2, 1))
    b = masked_forward(model, x[act], act, cache, 0.35, N, levels, order=(1, 2))
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_missing_cache_rows_are_an_error(model):
    x = tokens(10, 14)
    cache = KVCacheStore(model.n_layers, model.d_model)
    with pytest.raises(InvalidStateError):
        masked_forward(model, x[:4], np.arange(4), cache, 0.5, num_tokens=10)


def test_store_overwrites_and_moves_between_levels():
    cache = KVCacheStore(1, 4)
    k = np.ones((3, 4), np.float32)
    cache.store(0, 1, [0, 1, 2], k, k)
    cache.store(0, 1, [1], 2 * k[:1], 2 * k[:1])
    assert cache.entries[0][1]["ids"].tolist() == [0, 1, 2]
    assert cache.entries[0][1]["k"][1, 0] == 2.0
    cache.store(0, 2, [2], 3 * k[:1], 3 * k[:1])
    assert cache.entries[0][1]["ids"].tolist() == [0, 1]
    assert cache.owner_level(0) == {0: 1, 1: 1, 2: 2}
    with pytest.raises(InvalidInputError):
        cache.store(0, 3, [0], k[:1], k[:1])


# --- memory -------------------------------------------------------------------------

def test_empty_cache_report():
    rep = cache_memory_report(KVCacheStore(4, 64))
    assert rep["total_bytes"] == 0


def _frozen_cache(n_frozen, n_total=1200, d=64, layers=4):
    m = ToyDiT(4, d, 4, layers, seed=0)
    levels = np.full(n_total, 3, np.int8)
    levels[:n_frozen] = 1
    levels[: n_frozen // 3] = 2
    cache = KVCacheStore(layers, d)
    full_forward(m, np.random.default_rng(0).standard_normal((n_total, 4)), 0.2, cache, levels, 1)
    return cache


def test_memory_closed_form():
    cache = _frozen_cache(1000)
    rep = cache_memory_report(cache, num_tokens=1200)
    assert rep["total_bytes"] == 4 * 1000 * 64 * 2 * 4 == 2_048_000
    assert rep["total_bytes"] == cache.nbytes()
    assert sum(rep["per_layer_level"].values()) == rep["total_bytes"]
    assert rep["fraction_of_full"] == pytest.approx(1000 / 1200)


def test_memory_matches_measured_allocation():
    m = ToyDiT(4, 64, 4, 4, seed=0)
    n = 1200
    levels = np.full(n, 3, np.int8)
    levels[:1000] = 1
    x = np.random.default_rng(0).standard_normal((n, 4))
    tracemalloc.start()
    try:
        before = tracemalloc.get_traced_memory()[0]
        cache = KVCacheStore(4, 64)
        full_forward(m, x, 0.2, cache, levels, 1)
        grown = tracemalloc.get_traced_memory()[0] - before
    finally:
        tracemalloc.stop()
    reported = cache_memory_report(cache)["total_bytes"]
    assert abs(grown - reported) <= 0.10 * reported
