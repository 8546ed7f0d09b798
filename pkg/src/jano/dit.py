"""A small pre-norm Diffusion Transformer with a level-partitioned KV cache.

Weights are seeded and untrained: the model only has to have the compute
shape of a DiT. Tokens carry no positional encoding, so attention is exactly
invariant to the order of keys. That is what lets cached keys be appended
instead of scattered back to their original positions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, InvalidStateError, NumericError

F32 = np.float32


@dataclass
class LayerParams:
    norm1: np.ndarray
    wqkv: np.ndarray
    wo: np.ndarray
    norm2: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class ToyDiT:
    in_channels: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    seed: int = 0
    ff_mult: int = 4
    w_in: np.ndarray = field(init=False, repr=False)
    w_out: np.ndarray = field(init=False, repr=False)
    norm_out: np.ndarray = field(init=False, repr=False)
    layers: list = field(init=False, repr=False)

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise InvalidInputError("d_model must be divisible by n_heads")
        rng = np.random.default_rng(self.seed)
        d, dff = self.d_model, self.ff_mult * self.d_model

        def lin(n_in, n_out, gain=1.0):
            return (gain * rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)).astype(F32)

        self.w_in = lin(self.in_channels, d)
        self.layers = [
            LayerParams(
                norm1=(1.0 + 0.1 * rng.standard_normal(d)).astype(F32),
                wqkv=lin(d, 3 * d),
                wo=lin(d, d, 0.5),
                norm2=(1.0 + 0.1 * rng.standard_normal(d)).astype(F32),
                w1=lin(d, dff),
                w2=lin(dff, d, 0.5),
            )
            for _ in range(self.n_layers)
        ]
        self.norm_out = np.ones(d, dtype=F32)
        self.w_out = lin(d, self.in_channels, 0.5)

    @property
    def head_dim(self):
        return self.d_model // self.n_heads


def rms_norm(x, scale, eps=1e-6):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * scale


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(F32(0.7978845608) * (x + F32(0.044715) * x * x * x)))


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = 1000.0 * t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb.astype(F32)


def attention(q, k, v, n_heads):
    """Softmax attention of ``q`` (n, d) over ``k``, ``v`` (m, d), max-subtracted."""
    n, d = q.shape
    hd = d // n_heads
    out = np.empty((n, d), dtype=F32)
    scale = F32(1.0 / np.sqrt(hd))
    for h in range(n_heads):
        sl = slice(h * hd, (h + 1) * hd)
        s = (q[:, sl] * scale) @ k[:, sl].T
        s -= s.max(axis=1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=1, keepdims=True)
        out[:, sl] = s @ v[:, sl]
    return out


def _embed(model, tokens, t):
    x = np.asarray(tokens, dtype=F32)
    if x.ndim != 2 or x.shape[1] != model.in_channels:
        raise InvalidInputError(f"expected tokens of shape (n, {model.in_channels}), got {x.shape}")
    if x.shape[0] < 1:
        raise InvalidInputError("need at least one token")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input tokens")
    return x @ model.w_in + timestep_embedding(t, model.d_model)


def _qkv(layer, h, d):
    qkv = rms_norm(h, layer.norm1) @ layer.wqkv
    return qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]


def _finish_layer(layer, h, attn_out):
    h = h + attn_out @ layer.wo
    return h + gelu(rms_norm(h, layer.norm2) @ layer.w1) @ layer.w2


def _readout(model, h):
    return rms_norm(h, model.norm_out) @ model.w_out


def full_forward(model, tokens, t, cache=None, token_levels=None, step=None):
    """Velocity for every token with full attention.

    When ``cache`` and ``token_levels`` are given, keys and values of level-1
    and level-2 tokens are written to the cache.
    """
    h = _embed(model, tokens, t)
    d = model.d_model
    ids = np.arange(h.shape[0])
    for li, layer in enumerate(model.layers):
        q, k, v = _qkv(layer, h, d)
        if cache is not None and token_levels is not None:
            cache.store_levels(li, ids, k, v, token_levels, step)
        h = _finish_layer(layer, h, attention(q, k, v, model.n_heads))
    return _readout(model, h)


class KVCacheStore:
    """Per-layer, per-level keys and values of frozen tokens.

    Level 3 is never cached. A token id lives in at most one level.
    """

    LEVELS = (1, 2)

    def __init__(self, n_layers, d_model):
        self.n_layers = n_layers
        self.d_model = d_model
        empty = lambda: {"ids": np.empty(0, np.int64), "k": np.empty((0, d_model), F32),
                         "v": np.empty((0, d_model), F32), "step": None}
        self.entries = [{lv: empty() for lv in self.LEVELS} for _ in range(n_layers)]

    def owner_level(self, layer=0):
        """Mapping token id -> level for one layer."""
        return {int(i): lv for lv in self.LEVELS for i in self.entries[layer][lv]["ids"]}

    def cached_ids(self, layer=0):
        return np.concatenate([self.entries[layer][lv]["ids"] for lv in self.LEVELS])

    def store(self, layer, level, ids, k, v, step=None):
        """Write rows for ``ids``; existing rows are overwritten, new ones appended."""
        if level not in self.LEVELS:
            raise InvalidInputError(f"only levels {self.LEVELS} are cached, got {level}")
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            return
        other = self.entries[layer][3 - level]
        if other["ids"].size and np.isin(ids, other["ids"]).any():
            keep = ~np.isin(other["ids"], ids)
            other["ids"], other["k"], other["v"] = other["ids"][keep], other["k"][keep], other["v"][keep]
        e = self.entries[layer][level]
        if e["ids"].size == ids.size and np.array_equal(e["ids"], ids):
            e["k"][...] = k
            e["v"][...] = v
        else:
            pos = {int(i): r for r, i in enumerate(e["ids"])}
            rows = np.array([pos.get(int(i), -1) for i in ids], dtype=np.int64)
            hit = rows >= 0
            e["k"][rows[hit]] = k[hit]
            e["v"][rows[hit]] = v[hit]
            if (~hit).any():
                e["ids"] = np.concatenate([e["ids"], ids[~hit]])
                e["k"] = np.concatenate([e["k"], np.asarray(k, F32)[~hit]])
                e["v"] = np.concatenate([e["v"], np.asarray(v, F32)[~hit]])
        e["step"] = step

    def store_levels(self, layer, ids, k, v, token_levels, step=None):
        """Cache the rows of ``ids`` whose level (from ``token_levels``) is 1 or 2."""
        lv = np.asarray(token_levels)[ids]
        for level in self.LEVELS:
            sel = lv == level
            if sel.any():
                self.store(layer, level, ids[sel], k[sel], v[sel], step)

    def frozen_kv(self, layer, active_ids, order=(2, 1)):
        """Cached K and V of tokens not in ``active_ids``, concatenated by level."""
        ks, vs, owners = [], [], []
        for lv in order:
            e = self.entries[layer][lv]
            if e["ids"].size == 0:
                continue
            mask = ~np.isin(e["ids"], active_ids, assume_unique=True)
            if mask.all():
                ks.append(e["k"]), vs.append(e["v"]), owners.append(e["ids"])
            elif mask.any():
                ks.append(e["k"][mask]), vs.append(e["v"][mask]), owners.append(e["ids"][mask])
        if not ks:
            z = np.empty((0, self.d_model), F32)
            return z, z, np.empty(0, np.int64)
        return np.concatenate(ks), np.concatenate(vs), np.concatenate(owners)

    def nbytes(self):
        return sum(e[lv]["k"].nbytes + e[lv]["v"].nbytes for e in self.entries for lv in self.LEVELS)


def masked_forward(model, active_tokens, active_ids, cache, t, num_tokens=None,
                   token_levels=None, step=None, order=(2, 1)):
    """Velocities for the active tokens only.

    Queries come from the active tokens; keys and values are the active rows
    followed by the cached rows of every frozen token. Active tokens owned
    by level 1 or 2 have their cache rows refreshed before attention.
    """
    active_ids = np.asarray(active_ids, dtype=np.int64)
    h = _embed(model, active_tokens, t)
    if h.shape[0] != active_ids.size:
        raise InvalidInputError("active_tokens and active_ids disagree in length")
    d = model.d_model
    for li, layer in enumerate(model.layers):
        q, k, v = _qkv(layer, h, d)
        if token_levels is not None:
            cache.store_levels(li, active_ids, k, v, token_levels, step)
        else:
            owners = cache.owner_level(li)
            for level in KVCacheStore.LEVELS:
                sel = np.array([owners.get(int(i)) == level for i in active_ids], dtype=bool)
                if sel.any():
                    cache.store(li, level, active_ids[sel], k[sel], v[sel], step)
        ck, cv, cached = cache.frozen_kv(li, active_ids, order)
        if li == 0 and num_tokens is not None:
            covered = active_ids.size + cached.size
            if covered != num_tokens or np.intersect1d(active_ids, cached).size:
                raise InvalidStateError(
                    f"{num_tokens - covered} tokens are neither active nor cached"
                )
        keys = np.concatenate([k, ck]) if ck.size else k
        vals = np.concatenate([v, cv]) if cv.size else v
        h = _finish_layer(layer, h, attention(q, keys, vals, model.n_heads))
    return _readout(model, h)


def cache_memory_report(cache, num_tokens=None):
    """Bytes held per layer and level: rows * d_model * 2 (K and V) * 4."""
    per = {}
    total = 0
    for li, e in enumerate(cache.entries):
        for lv in KVCacheStore.LEVELS:
            b = int(e[lv]["ids"].size) * cache.d_model * 2 * 4
            per[(li, lv)] = b
            total += b
    report = {"per_layer_level": per, "total_bytes": total}
    if num_tokens:
        report["full_kv_bytes"] = cache.n_layers * num_tokens * cache.d_model * 2 * 4
        report["fraction_of_full"] = total / report["full_kv_bytes"]
    return report
