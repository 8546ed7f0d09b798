"""Convergence levels, threshold search and the three-phase step plan."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetInfeasibleError, InvalidInputError

STATIC, MODERATE, ACTIVE = 1, 2, 3

# Threshold that puts no block at or below it (scores live in [0, 1]).
BELOW_ALL = -1.0

# (static threshold, static interval, moderate threshold, moderate interval)
PRESETS = {
    "flux-1": [(0.1, 8, 0.5, 5), (0.2, 10, 0.5, 3), (0.3, 10, 0.6, 3)],
    "wan-1.3b": [(0.1, 3, 0.3, 2), (0.15, 6, 0.4, 4), (0.4, 6, 0.6, 4)],
    "wan-14b": [(0.1, 6, 0.3, 3), (0.15, 6, 0.4, 4), (0.4, 6, 0.6, 4)],
}
PRESET_WARMUP = {"flux-1": 7, "wan-1.3b": 6, "wan-14b": 6}


def default_cooldown(steps):
    return max(2, math.ceil(0.04 * steps))


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int = 50
    warmup: int = 6
    cooldown: int = 2
    static_threshold: float = 0.4
    static_interval: int = 6
    moderate_threshold: float = 0.6
    moderate_interval: int = 4

    def __post_init__(self):
        if self.total_steps < 1 or self.warmup < 0 or self.cooldown < 0:
            raise InvalidInputError("step counts must be non-negative and total_steps >= 1")
        if self.warmup + self.cooldown >= self.total_steps:
            raise InvalidInputError(
                f"warm-up ({self.warmup}) + cool-down ({self.cooldown}) must be < total steps ({self.total_steps})"
            )
        if self.static_interval < 1 or self.moderate_interval < 1:
            raise InvalidInputError("intervals must be >= 1")
        if self.static_interval < self.moderate_interval:
            raise InvalidInputError("static blocks must not refresh more often than moderate blocks")
        check_thresholds(self.static_threshold, self.moderate_threshold)

    @classmethod
    def preset(cls, name, row=-1, total_steps=50, warmup=None, cooldown=None):
        s, si, m, mi = PRESETS[name][row]
        return cls(
            total_steps=total_steps,
            warmup=PRESET_WARMUP[name] if warmup is None else warmup,
            cooldown=default_cooldown(total_steps) if cooldown is None else cooldown,
            static_threshold=s,
            static_interval=si,
            moderate_threshold=m,
            moderate_interval=mi,
        )

    def with_thresholds(self, static, moderate):
        d = dict(self.__dict__, static_threshold=float(static), moderate_threshold=float(moderate))
        return ScheduleConfig(**d)

    @property
    def interleaved(self):
        return self.total_steps - self.warmup - self.cooldown

    def active_steps(self, level):
        """Number of steps on which a block of ``level`` is computed."""
        if level == ACTIVE:
            return self.total_steps
        n = self.static_interval if level == STATIC else self.moderate_interval
        return self.warmup + self.cooldown + math.ceil(self.interleaved / n)


def check_thresholds(static, moderate):
    if not (BELOW_ALL <= static <= moderate <= 1.0):
        raise InvalidInputError(
            f"thresholds must satisfy {BELOW_ALL} <= static <= moderate <= 1, got ({static}, {moderate})"
        )


@dataclass(frozen=True)
class LevelMap:
    levels: np.ndarray  # (num_blocks,) in {1, 2, 3}

    def counts(self):
        return {lv: int(np.sum(self.levels == lv)) for lv in (STATIC, MODERATE, ACTIVE)}

    def token_levels(self, grid):
        return grid.expand(self.levels)


def classify_levels(cmap, cfg):
    """Score <= static -> 1, <= moderate -> 2, else 3 (ties go to the lower level)."""
    check_thresholds(cfg.static_threshold, cfg.moderate_threshold)
    scores = np.asarray(getattr(cmap, "normalized", cmap), dtype=np.float64)
    levels = np.where(
        scores <= cfg.static_threshold,
        STATIC,
        np.where(scores <= cfg.moderate_threshold, MODERATE, ACTIVE),
    )
    return LevelMap(levels.astype(np.int8))


@dataclass(frozen=True)
class StepPlan:
    """``active[k-1, b]`` says whether block ``b`` is computed at step ``k``."""

    active: np.ndarray  # (T, num_blocks) bool
    phases: tuple  # per step: "warmup" | "interleaved" | "cooldown"

    @property
    def steps(self):
        return self.active.shape[0]

    @property
    def num_blocks(self):
        return self.active.shape[1]

    def active_blocks(self, k):
        return np.flatnonzero(self.active[k - 1])

    def active_tokens(self, k, grid):
        ids = [grid.token_index_map[b] for b in self.active_blocks(k)]
        return np.sort(np.concatenate(ids)) if ids else np.empty(0, dtype=np.int64)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "phase", "active_count", "active_ids"])
            for k in range(1, self.steps + 1):
                ids = self.active_blocks(k)
                w.writerow([k, self.phases[k - 1], len(ids), " ".join(map(str, ids))])


def full_plan(steps, num_blocks):
    return StepPlan(np.ones((steps, num_blocks), dtype=bool), ("warmup",) * steps)


def build_step_plan(levels, cfg):
    lv = np.asarray(getattr(levels, "levels", levels))
    T, W, D = cfg.total_steps, cfg.warmup, cfg.cooldown
    active = np.ones((T, lv.size), dtype=bool)
    phases = []
    for k in range(1, T + 1):
        if k <= W:
            phases.append("warmup")
        elif k > T - D:
            phases.append("cooldown")
        else:
            phases.append("interleaved")
            j = k - W - 1
            row = lv == ACTIVE
            if j % cfg.moderate_interval == 0:
                row |= lv == MODERATE
            if j % cfg.static_interval == 0:
                row |= lv == STATIC
            active[k - 1] = row
    return StepPlan(active, tuple(phases))


@dataclass(frozen=True)
class CostEstimate:
    token_steps: int
    attention_pairs: int  # query-key products, summed over steps, per layer
    fraction: float

    def attention_flops(self, d_model, layers):
        """QK^T and AV each cost 2*d multiply-adds per query-key pair."""
        return 4 * d_model * layers * self.attention_pairs


def estimate_cost(plan, grid):
    if plan.num_blocks != grid.num_blocks:
        raise InvalidInputError(f"plan has {plan.num_blocks} blocks, grid has {grid.num_blocks}")
    sizes = grid.block_sizes()
    per_step = plan.active.astype(np.int64) @ sizes
    N = grid.num_tokens
    token_steps = int(per_step.sum())
    return CostEstimate(token_steps, token_steps * N, token_steps / (plan.steps * N))


def threshold_candidates(scores, step=0.05):
    """``BELOW_ALL`` plus the score quantiles at 0, step, ..., 1."""
    qs = np.quantile(scores, np.linspace(0.0, 1.0, int(round(1 / step)) + 1))
    return np.concatenate([[BELOW_ALL], np.unique(qs)])


def optimize_thresholds(cmap, budget, cfg, grid=None, step=0.05):
    """Thresholds that maximise level-3 coverage under a token-step budget.

    Feasible pairs have cost fraction <= budget. Among them, prefer more
    level-3 blocks, then more level-2 blocks, then the lower static threshold,
    then the lower moderate threshold.
    """
    if not 0 < budget <= 1:
        raise InvalidInputError(f"budget must lie in (0, 1], got {budget}")
    scores = np.asarray(getattr(cmap, "normalized", cmap), dtype=np.float64)
    grid = grid if grid is not None else getattr(cmap, "grid", None)
    sizes = grid.block_sizes() if grid is not None else np.ones(scores.size, dtype=np.int64)
    T, N = cfg.total_steps, sizes.sum()
    a1, a2, a3 = (cfg.active_steps(lv) for lv in (STATIC, MODERATE, ACTIVE))
    cand = threshold_candidates(scores, step)

    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    csize = np.concatenate([[0], np.cumsum(sizes[order])])
    # number of blocks with score <= c, and their token count
    below = np.searchsorted(sorted_scores, cand, side="right")
    tok_below = csize[below]

    s_idx, m_idx = np.triu_indices(cand.size)
    n1, n12 = below[s_idx], below[m_idx]
    t1, t12 = tok_below[s_idx], tok_below[m_idx]
    cost = (a1 * t1 + a2 * (t12 - t1) + a3 * (N - t12)) / (T * N)
    feasible = cost <= budget + 1e-12
    if not feasible.any():
        raise BudgetInfeasibleError(budget, float(cost.min()))
    n3 = scores.size - n12
    n2 = n12 - n1
    # lexsort: last key is primary
    keys = (m_idx, s_idx, -n2, -n3)
    idx = np.flatnonzero(feasible)
    best = idx[np.lexsort(tuple(k[idx] for k in keys))[0]]
    return float(cand[s_idx[best]]), float(cand[m_idx[best]])
