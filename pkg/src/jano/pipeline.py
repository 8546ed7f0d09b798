"""Warm-up / interleaved / cool-down generation with frozen-token reuse."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .complexity import AnalyzerConfig, complexity_map
from .dit import KVCacheStore, cache_memory_report, full_forward, masked_forward
from .errors import InvalidInputError, InvalidStateError
from .flow import T_EPS
from .latents import BlockGrid, LatentTensor
from .scheduler import ScheduleConfig, build_step_plan, classify_levels, estimate_cost


class DiTVelocity:
    """Adapter running a :class:`~jano.dit.ToyDiT` with KV caching."""

    uses_cache = True

    def __init__(self, model):
        self.model = model

    def new_cache(self):
        return KVCacheStore(self.model.n_layers, self.model.d_model)

    def full(self, x, t, cache=None, token_levels=None, step=None):
        return full_forward(self.model, x, t, cache, token_levels, step).astype(np.float64)

    def masked(self, x, ids, t, cache, token_levels, step):
        v = masked_forward(self.model, x[ids], ids, cache, t, num_tokens=x.shape[0],
                           token_levels=token_levels, step=step)
        return v.astype(np.float64)


class FieldVelocity:
    """Adapter for a closed-form token field such as :class:`~jano.scenes.BlockTargetField`."""

    uses_cache = False

    def __init__(self, field):
        self.field = field

    def new_cache(self):
        return None

    def full(self, x, t, cache=None, token_levels=None, step=None):
        return self.field.velocity_tokens(x, t)

    def masked(self, x, ids, t, cache, token_levels, step):
        return self.field.velocity_tokens(x[ids], t, ids=ids)


def as_velocity_model(obj):
    if hasattr(obj, "full") and hasattr(obj, "masked"):
        return obj
    if hasattr(obj, "layers") and hasattr(obj, "d_model"):
        return DiTVelocity(obj)
    if hasattr(obj, "velocity_tokens"):
        return FieldVelocity(obj)
    raise InvalidInputError(f"cannot use {type(obj).__name__} as a velocity model")


@dataclass
class PipelineConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    analyzer: AnalyzerConfig = field(default_factory=AnalyzerConfig)


@dataclass
class PipelineState:
    x: np.ndarray  # (N, C) current tokens
    v_last: np.ndarray  # (N, C) most recent velocity, NaN until computed
    step: int = 0
    timing: list = field(default_factory=list)  # dicts: step, phase, level, ms
    token_steps: int = 0
    cache: KVCacheStore | None = None
    cache_bytes: int = 0
    warmup_latents: list = field(default_factory=list)
    plan: object = None
    levels: object = None
    wall_ms: float = 0.0

    def timing_totals(self):
        out = {}
        for row in self.timing:
            key = (row["phase"], row["level"])
            out[key] = out.get(key, 0.0) + row["ms"]
        return out

    def write_timing_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "phase", "level", "milliseconds", "bytes"])
            w.writeheader()
            for row in self.timing:
                w.writerow({"step": row["step"], "phase": row["phase"], "level": row["level"],
                            "milliseconds": f"{row['ms']:.6f}", "bytes": row.get("bytes", 0)})

    def summary(self):
        return {
            "steps": self.step,
            "token_steps": self.token_steps,
            "wall_ms": self.wall_ms,
            "ledger_ms": sum(r["ms"] for r in self.timing),
            "cache_bytes": self.cache_bytes,
        }


def advance_frozen(state, frozen_ids, dt):
    """Integrate frozen tokens with their last computed velocity."""
    frozen_ids = np.asarray(frozen_ids, dtype=np.int64)
    if frozen_ids.size == 0:
        return state.x
    v = state.v_last[frozen_ids]
    if np.isnan(v).any():
        raise InvalidStateError("a frozen token has no computed velocity yet")
    state.x[frozen_ids] += dt * v
    return state.x


def _tokens_of(x0):
    if isinstance(x0, LatentTensor):
        return x0.tokens().astype(np.float64), x0.spatial_shape
    arr = np.asarray(x0, dtype=np.float64)
    if arr.ndim == 4:
        return arr.reshape(arr.shape[0], -1).T.copy(), arr.shape[1:]
    raise InvalidInputError("x0 must be a LatentTensor or a (C, F, H, W) array")


def _to_latent(tokens, spatial_shape):
    return tokens.T.reshape(tokens.shape[1], *spatial_shape)


def run_pipeline(model, x0, plan=None, cfg=None, grid=None, levels=None):
    """Generate from ``x0`` following ``plan``.

    With ``plan=None`` the analyzer runs on the warm-up latents and the plan
    is built from its levels. Returns ``(final latent array, state)``.
    """
    cfg = cfg or PipelineConfig()
    vm = as_velocity_model(model)
    x, spatial = _tokens_of(x0)
    grid = grid or BlockGrid(spatial, cfg.analyzer.block_size)
    if grid.num_tokens != x.shape[0]:
        raise InvalidInputError(f"grid covers {grid.num_tokens} tokens, latent has {x.shape[0]}")
    sched = cfg.schedule
    T = plan.steps if plan is not None else sched.total_steps
    if plan is not None and plan.num_blocks != grid.num_blocks:
        raise InvalidInputError(f"plan has {plan.num_blocks} blocks, grid has {grid.num_blocks}")
    state = PipelineState(x=x, v_last=np.full_like(x, np.nan), cache=vm.new_cache(), plan=plan,
                          levels=levels)
    token_block = grid.token_block_ids()
    token_levels = None
    block_tokens = grid.token_index_map
    if plan is not None:
        if state.levels is None:
            state.levels = _levels_from_plan(plan)
        token_levels = state.levels.levels[token_block]
    dt = 1.0 / T
    start = mark = time.perf_counter()

    for k in range(1, T + 1):
        t = min((k - 1) / T, 1.0 - T_EPS)
        phase = state.plan.phases[k - 1] if state.plan is not None else "warmup"
        if phase == "interleaved":
            blocks = state.plan.active_blocks(k)
            ids = np.sort(np.concatenate([block_tokens[b] for b in blocks])) if blocks.size else np.empty(0, np.int64)
            frozen = np.setdiff1d(np.arange(x.shape[0]), ids, assume_unique=True)
            if ids.size:
                v = vm.masked(state.x, ids, t, state.cache, token_levels, k)
                state.x[ids] += dt * v
                state.v_last[ids] = v
            advance_frozen(state, frozen, dt)
            state.token_steps += ids.size
            lv_of = state.levels.levels[token_block[ids]] if ids.size else np.empty(0)
            # chained marks so the ledger tiles the wall clock
            now = time.perf_counter()
            elapsed, mark = (now - mark) * 1e3, now
            for lv in (1, 2, 3):
                n = int(np.sum(lv_of == lv))
                if n:
                    state.timing.append({"step": k, "phase": phase, "level": f"L{lv}", "ms": elapsed * n / ids.size})
            if not ids.size:
                state.timing.append({"step": k, "phase": phase, "level": "none", "ms": elapsed})
        else:
            nxt = state.plan.phases[k] if state.plan is not None and k < T else None
            fill = token_levels if nxt == "interleaved" else None
            v = vm.full(state.x, t, state.cache, fill, k)
            state.x += dt * v
            state.v_last[:] = v
            state.token_steps += x.shape[0]
            if phase == "warmup" and k <= sched.warmup:
                state.warmup_latents.append(_to_latent(state.x, spatial).astype(np.float32))
            now = time.perf_counter()
            state.timing.append({"step": k, "phase": phase, "level": "all", "ms": (now - mark) * 1e3})
            mark = now
        if state.plan is None and k == sched.warmup:
            acfg = cfg.analyzer
            cmap = complexity_map(state.warmup_latents[: acfg.warmup], acfg)
            state.levels = classify_levels(cmap, sched)
            state.plan = build_step_plan(state.levels, sched)
            now = time.perf_counter()
            state.timing.append({"step": k, "phase": "analyze", "level": "all", "ms": (now - mark) * 1e3})
            mark = now
            token_levels = state.levels.levels[token_block]
        state.step = k
    state.wall_ms = (time.perf_counter() - start) * 1e3
    if state.cache is not None:
        state.cache_bytes = cache_memory_report(state.cache)["total_bytes"]
    return _to_latent(state.x, spatial), state


def _levels_from_plan(plan):
    """Recover per-block levels from activity counts in the interleaved phase."""
    from .scheduler import LevelMap

    inter = np.array([p == "interleaved" for p in plan.phases])
    if not inter.any():
        return LevelMap(np.full(plan.num_blocks, 3, dtype=np.int8))
    counts = plan.active[inter].sum(axis=0)
    distinct = np.unique(counts)[::-1]
    levels = np.full(plan.num_blocks, 3, dtype=np.int8)
    n_inter = inter.sum()
    lower = [c for c in distinct if c < n_inter]
    for lv, c in zip((2, 1), lower[:2] if len(lower) > 1 else [None] + lower):
        if c is not None:
            levels[counts == c] = lv
    return LevelMap(levels)


def plain_loop(model, x0, steps):
    """Reference: full forward at every step, no plan, no cache."""
    vm = as_velocity_model(model)
    x, spatial = _tokens_of(x0)
    dt = 1.0 / steps
    for k in range(1, steps + 1):
        x = x + dt * vm.full(x, min((k - 1) / steps, 1.0 - T_EPS))
    return _to_latent(x, spatial)


def relative_l2(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def pipeline_report(state, grid, full_ms=None):
    est = estimate_cost(state.plan, grid) if state.plan is not None else None
    out = state.summary()
    if est is not None:
        out["token_step_fraction"] = est.fraction
        out["estimated_token_steps"] = est.token_steps
    if full_ms:
        out["speedup"] = full_ms / state.wall_ms
    return json.loads(json.dumps(out))
