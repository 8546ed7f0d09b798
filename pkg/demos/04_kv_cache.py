"""
Frozen tokens keep attending through the cache
==============================================

In an interleaved step only the active tokens are pushed through the network.
Frozen tokens still contribute keys and values, read from the cache slot of
their level, so attention over the whole sequence stays exact with respect to
the cached state. Cost then scales with the number of active queries.
"""

import time

import numpy as np

from jano.dit import KVCacheStore, ToyDiT, cache_memory_report, full_forward, masked_forward

N, d, L = 4096, 64, 4
model = ToyDiT(4, d_model=d, n_heads=4, n_layers=L, seed=0)
rng = np.random.default_rng(0)
x = rng.standard_normal((N, 4)).astype(np.float32)

# a full step fills the cache; here 75% of tokens are frozen at level 1
levels = np.full(N, 3, np.int8)
levels[rng.permutation(N)[: 3 * N // 4]] = 1
cache = KVCacheStore(L, d)
full = full_forward(model, x, 0.5, cache, levels, step=1)

# same inputs, same time: the masked step reproduces the full step's active rows
act = np.flatnonzero(levels == 3)
out = masked_forward(model, x[act], act, cache, 0.5, num_tokens=N, token_levels=levels, step=2)
print("max |masked - full| on active rows:", float(np.abs(out - full[act]).max()))

rep = cache_memory_report(cache, num_tokens=N)
print(f"cache holds {rep['total_bytes']:,} bytes = frozen rows x d x 2 (K,V) x 4 bytes x {L} layers "
      f"({rep['fraction_of_full']:.0%} of a full cache)")


def best_ms(fn, repeats=3):
    out = np.inf
    for _ in range(repeats):
        tic = time.perf_counter()
        fn()
        out = min(out, time.perf_counter() - tic)
    return out * 1e3


# for timing, cache every token so any subset can be frozen
timing_cache = KVCacheStore(L, d)
full_forward(model, x, 0.5, timing_cache, np.ones(N, np.int8), step=1)
t_full = best_ms(lambda: full_forward(model, x, 0.5))
for frac in (1.0, 0.5, 0.25, 0.1):
    n = int(frac * N)
    ids = np.sort(rng.permutation(N)[:n])
    lv = np.ones(N, np.int8)
    lv[ids] = 3
    ms = best_ms(lambda: masked_forward(model, x[ids], ids, timing_cache, 0.5, num_tokens=N, token_levels=lv))
    print(f"{frac:>4.0%} active: {ms:7.1f} ms  ({ms / t_full:.2f} of full step)")
