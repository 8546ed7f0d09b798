"""Experiment harness behind the command line and the demos.

Each experiment returns plain rows (lists of dicts) plus a summary dict, so
the same numbers can be written to CSV, asserted in tests or printed.
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .complexity import (AnalyzerConfig, complexity_map, convergence_ground_truth, fft_baseline_map,
                         fft_ground_truth, permutation_pvalue, rank_correlation, recognition_accuracy)
from .dit import KVCacheStore, ToyDiT, full_forward, masked_forward
from .errors import ConfigError
from .flow import MixtureTarget, velocity_constancy_profile
from .latents import BlockGrid
from .pipeline import PipelineConfig, plain_loop, relative_l2, run_pipeline
from .scenes import oracle_rollout, render_scene, synth_trajectory
from .scheduler import (LevelMap, ScheduleConfig, build_step_plan, classify_levels, estimate_cost,
                        full_plan, optimize_thresholds)


def resolve_workers(requested=1):
    env = os.environ.get("JANO_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"JANO_WORKERS must be an integer, got {env!r}") from None
    return max(1, int(requested))


def pool_map(fn, items, workers=1):
    """Ordered map over ``items``; a process pool when ``workers > 1``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))


def simulate_scene(spec, steps, seed, mode="exact", block_size=(2, 8, 8), sigma_scale=0.5):
    """Clean latent and denoising run of one scene. ``field`` is None for exact paths."""
    clean = render_scene(spec)
    if mode == "exact":
        return clean, synth_trajectory(clean, steps, seed), None
    run, field = oracle_rollout(clean, steps, seed, block_size, sigma_scale)
    return clean, run, field


# --- recognition -----------------------------------------------------------

@dataclass(frozen=True)
class RecognitionJob:
    spec: object
    steps: int = 50
    seed: int = 0
    analyzer: AnalyzerConfig = AnalyzerConfig()
    level_fractions: tuple = (1 / 3, 1 / 3, 1 / 3)


def analyze_scene(job):
    """Analyzer map, both ground truths and the FFT-on-warm-up baseline for one scene."""
    clean, run, _ = simulate_scene(job.spec, job.steps, job.seed)
    cfg = job.analyzer
    grid = BlockGrid(clean.spatial_shape, cfg.block_size)
    cmap = complexity_map(run, cfg)
    fft_gt = fft_ground_truth(clean, grid)
    conv_gt = convergence_ground_truth(run, grid)
    base = fft_baseline_map(run, grid, cfg.warmup)
    fr = job.level_fractions
    return {
        "grid": grid,
        "score": cmap.normalized,
        "raw_score": cmap.scores,
        "fft_gt": fft_gt,
        "conv_gt": conv_gt,
        "baseline": base,
        "accuracy": recognition_accuracy(cmap.normalized, fft_gt, fr),
        "baseline_accuracy": recognition_accuracy(base, fft_gt, fr),
    }


def recognition_experiment(specs, steps=50, warmup=5, block_size=(2, 8, 8), seed=0, n_perm=10_000,
                           level_fractions=(1 / 3, 1 / 3, 1 / 3), w_temporal=0.7, w_spatial=0.3,
                           workers=1):
    """Per-block rows and a suite summary (accuracies, r, rho and permutation p)."""
    acfg = AnalyzerConfig(warmup, w_temporal, w_spatial, block_size)
    jobs = [RecognitionJob(s, steps, seed + i, acfg, tuple(level_fractions)) for i, s in enumerate(specs)]
    results = pool_map(analyze_scene, jobs, workers)
    rows = []
    for i, res in enumerate(results):
        grid = res["grid"]
        for b in range(grid.num_blocks):
            fi, hi, wi = grid.block_coords(b)
            rows.append({"scene": i, "block": b, "fi": fi, "hi": hi, "wi": wi,
                         "score": res["score"][b], "fft_gt": res["fft_gt"][b],
                         "conv_gt": res["conv_gt"][b], "fft_baseline": res["baseline"][b]})
    score = np.concatenate([r["score"] for r in results])
    conv = np.concatenate([r["conv_gt"] for r in results])
    fft = np.concatenate([r["fft_gt"] for r in results])
    acc = np.array([r["accuracy"] for r in results])
    base = np.array([r["baseline_accuracy"] for r in results])
    r_conv, rho_conv = rank_correlation(score, conv)
    r_fft, rho_fft = rank_correlation(score, fft)
    summary = {
        "scenes": len(results),
        "warmup": warmup,
        "accuracy": acc.tolist(),
        "baseline_accuracy": base.tolist(),
        "median_accuracy": float(np.median(acc)),
        "median_baseline_accuracy": float(np.median(base)),
        "r_conv": r_conv, "rho_conv": rho_conv,
        "p_conv": permutation_pvalue(score, conv, n_perm, seed),
        "r_fft": r_fft, "rho_fft": rho_fft,
        "p_fft": permutation_pvalue(score, fft, n_perm, seed),
        "permutations": n_perm,
    }
    return rows, summary


# --- timing of the toy model -------------------------------------------------

class StepTimer:
    """Memoised wall time of one toy-DiT step for a given number of active tokens.

    The cache is pre-filled so masked steps attend over all ``N`` keys, which
    is the compute shape of an interleaved step.
    """

    def __init__(self, model, num_tokens, seed=0, repeats=1):
        self.model = model
        self.N = num_tokens
        self.repeats = repeats
        rng = np.random.default_rng(seed)
        self.x = rng.standard_normal((num_tokens, model.in_channels)).astype(np.float32)
        self.perm = rng.permutation(num_tokens)
        self.cache = KVCacheStore(model.n_layers, model.d_model)
        full_forward(model, self.x, 0.5, self.cache, np.ones(num_tokens, np.int8), 0)
        self._ms = {}

    def __call__(self, n_active):
        n_active = int(n_active)
        if n_active not in self._ms:
            best = np.inf
            for _ in range(self.repeats):
                tic = time.perf_counter()
                if n_active >= self.N:
                    full_forward(self.model, self.x, 0.5)
                elif n_active > 0:
                    ids = np.sort(self.perm[:n_active])
                    masked_forward(self.model, self.x[ids], ids, self.cache, 0.5)
                best = min(best, time.perf_counter() - tic)
            self._ms[n_active] = best * 1e3
        return self._ms[n_active]

    def plan_ms(self, plan, grid):
        counts = plan.active.astype(np.int64) @ grid.block_sizes()
        return float(sum(self(c) for c in counts))


def query_flops(plan, grid, d_model, layers):
    """Query-side attention FLOPs: 4 * d * L per (active query, key) pair, keys = N."""
    counts = plan.active.astype(np.int64) @ grid.block_sizes()
    return int(4 * d_model * layers * grid.num_tokens * counts.sum())


# --- ablation --------------------------------------------------------------

def random_static_levels(num_blocks, n_static, rng):
    levels = np.full(num_blocks, 3, dtype=np.int8)
    levels[rng.permutation(num_blocks)[:n_static]] = 1
    return LevelMap(levels)


@dataclass(frozen=True)
class AblationJob:
    spec: object
    index: int
    ratios: tuple
    schedule: ScheduleConfig
    analyzer: AnalyzerConfig
    steps: int = 50
    seed: int = 0
    mask_seed: int = 0
    sigma_scale: float = 0.5


def ablate_scene(job):
    """Random-static vs convergence-aware plans at matched token-step budgets."""
    clean, run, field = simulate_scene(job.spec, job.steps, job.seed, "oracle-rollout",
                                       job.analyzer.block_size, job.sigma_scale)
    grid = BlockGrid(clean.spatial_shape, job.analyzer.block_size)
    cfg = PipelineConfig(job.schedule, job.analyzer)
    full = plain_loop(field, run.x0, job.steps)
    cmap = complexity_map(run, job.analyzer)
    rng = np.random.default_rng(job.mask_seed + 7919 * job.index)
    nb = grid.num_blocks
    rows = []
    for ratio in job.ratios:
        rand_levels = random_static_levels(nb, int(round(ratio * nb)), rng)
        rand_plan = build_step_plan(rand_levels, job.schedule)
        budget = estimate_cost(rand_plan, grid).fraction
        s, m = optimize_thresholds(cmap, budget, job.schedule, grid)
        conv_levels = classify_levels(cmap, job.schedule.with_thresholds(s, m))
        conv_plan = build_step_plan(conv_levels, job.schedule)
        for arm, levels, plan in (("random", rand_levels, rand_plan), ("convergence", conv_levels, conv_plan)):
            out, _ = run_pipeline(field, run.x0, plan, cfg, grid, levels)
            est = estimate_cost(plan, grid)
            rows.append({"scene": job.index, "mask_ratio": ratio, "arm": arm,
                         "static_blocks": int(np.sum(levels.levels == 1)),
                         "moderate_blocks": int(np.sum(levels.levels == 2)),
                         "token_step_fraction": est.fraction,
                         "frozen_fraction": 1.0 - est.fraction,
                         "rel_l2": relative_l2(out, full),
                         "_plan": plan})
    return rows


def _r_squared(x, y):
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    tot = np.sum((y - y.mean()) ** 2)
    return float(1.0 - resid @ resid / tot) if tot > 0 else 1.0, coef


def ablation_experiment(specs, ratios, schedule, analyzer, steps=50, seed=0, mask_seed=0, sigma_scale=0.5,
                        model=None, workers=1):
    """Rows per (scene, ratio, arm) and a summary with win counts and linear-fit R^2.

    When ``model`` (a :class:`ToyDiT`) is given, each plan is also timed with
    it to give a measured speedup.
    """
    jobs = [AblationJob(s, i, tuple(ratios), schedule, analyzer, steps, seed + i, mask_seed, sigma_scale)
            for i, s in enumerate(specs)]
    rows = [r for part in pool_map(ablate_scene, jobs, workers) for r in part]
    grid = BlockGrid(specs[0].canvas[1:], analyzer.block_size)
    timer = StepTimer(model, grid.num_tokens) if model is not None else None
    full_flops = query_flops(full_plan(steps, grid.num_blocks), grid, 64, 1)
    full_ms = timer.plan_ms(full_plan(steps, grid.num_blocks), grid) if timer else None
    for r in rows:
        plan = r.pop("_plan")
        r["query_flop_fraction"] = query_flops(plan, grid, 64, 1) / full_flops
        if timer is not None:
            r["measured_speedup"] = full_ms / timer.plan_ms(plan, grid)
    wins = 0
    pairs = 0
    for i in range(len(specs)):
        for ratio in ratios:
            a = {r["arm"]: r for r in rows if r["scene"] == i and r["mask_ratio"] == ratio}
            pairs += 1
            wins += a["convergence"]["rel_l2"] <= a["random"]["rel_l2"] + 1e-12
    frozen = [r["frozen_fraction"] for r in rows]
    r2_flops, _ = _r_squared(frozen, [r["query_flop_fraction"] for r in rows])
    summary = {"pairs": pairs, "convergence_wins": int(wins), "r2_query_flops": r2_flops,
               "max_rel_l2": max(r["rel_l2"] for r in rows)}
    if timer is not None:
        r2_time, _ = _r_squared(frozen, [1.0 / r["measured_speedup"] for r in rows])
        summary["r2_measured_time"] = r2_time
    return rows, summary


# --- freezing pipeline ---------------------------------------------------------

def run_experiment(spec, schedule, analyzer, steps=50, seed=0, mode="oracle-rollout", sigma_scale=0.5,
                   model=None, budget=None):
    """Full run vs convergence-aware run of one scene.

    ``model`` is a :class:`ToyDiT`; when None the closed-form target field
    is the velocity model (``mode`` must then be ``oracle-rollout``).
    """
    clean, run, field = simulate_scene(spec, steps, seed, mode, analyzer.block_size, sigma_scale)
    grid = BlockGrid(clean.spatial_shape, analyzer.block_size)
    vm = field if model is None else model
    if vm is None:
        from .errors import InvalidInputError
        raise InvalidInputError("exact mode has no velocity field; supply a model")
    cfg = PipelineConfig(schedule, analyzer)
    full_out, full_state = run_pipeline(vm, run.x0, full_plan(steps, grid.num_blocks), cfg, grid)
    plan = None
    levels = None
    if budget is not None:
        # analyzer map from a warm-up pass, thresholds fitted to the budget
        cmap = complexity_map(full_state.warmup_latents, analyzer)
        s, m = optimize_thresholds(cmap, budget, schedule, grid)
        sched = schedule.with_thresholds(s, m)
        levels = classify_levels(cmap, sched)
        plan = build_step_plan(levels, sched)
        cfg = PipelineConfig(sched, analyzer)
    out, state = run_pipeline(vm, run.x0, plan, cfg, grid, levels)
    est = estimate_cost(state.plan, grid)
    summary = {
        "num_tokens": grid.num_tokens,
        "num_blocks": grid.num_blocks,
        "levels": {str(k): v for k, v in state.levels.counts().items()},
        "token_steps": state.token_steps,
        "token_step_fraction": est.fraction,
        "full_ms": full_state.wall_ms,
        "run_ms": state.wall_ms,
        "ledger_ms": float(sum(r["ms"] for r in state.timing)),
        "speedup": full_state.wall_ms / state.wall_ms,
        "token_step_speedup": 1.0 / est.fraction,
        "rel_l2": relative_l2(out, full_out),
        "cache_bytes": state.cache_bytes,
    }
    return out, state, summary


# --- constancy ---------------------------------------------------------------

def two_component_mixture(dim, separation, component_std, rng):
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    means = np.stack([0.5 * separation * direction, -0.5 * separation * direction])
    return MixtureTarget(np.array([0.5, 0.5]), means, np.full(2, component_std**2))


def constancy_experiment(dim=8, separation=200.0, component_std=0.05, trials=20, times=None, seed=0):
    """Velocity-difference profiles for point-mass, same-component and cross-component pairs.

    Returns per-(trial, t) rows and per-trial flags.
    """
    times = np.linspace(0.0, 0.5, 11) if times is None else np.asarray(times, np.float64)
    rng = np.random.default_rng(seed)
    rows, flags = [], []
    for trial in range(trials):
        mix = two_component_mixture(dim, separation, component_std, rng)
        point = MixtureTarget.point_mass(mix.means[0])
        x0a, x0b = rng.standard_normal((2, dim))
        za, zb, zc = rng.standard_normal((3, dim)) * component_std
        x1a, x1b, x1c = mix.means[0] + za, mix.means[0] + zb, mix.means[1] + zc
        pm = velocity_constancy_profile(point, (x0a, point.means[0]), (x0b, point.means[0]), times)
        same = velocity_constancy_profile(mix, (x0a, x1a), (x0b, x1b), times)
        cross = velocity_constancy_profile(mix, (x0a, x1a), (x0b, x1c), times)
        for t, a, b, c in zip(times, pm, same, cross):
            rows.append({"trial": trial, "t": float(t), "point_mass": a, "same_component": b,
                         "cross_component": c})
        flags.append({
            "trial": trial,
            "point_mass_flat": bool(np.ptp(pm) <= 1e-9 * max(1.0, pm.max())),
            "same_std_over_mean": float(same.std() / same.mean()),
            "cross_exceeds_same": bool(cross[-1] > same[-1]),
            # net growth across the window; the profile jumps once the posterior commits
            "cross_grows": bool(cross[-1] - cross[0] > abs(same[-1] - same[0])),
        })
    return rows, flags


def suite_toy_model(in_channels, d_model=64, n_heads=4, n_layers=4, seed=0):
    return ToyDiT(in_channels, d_model, n_heads, n_layers, seed)
