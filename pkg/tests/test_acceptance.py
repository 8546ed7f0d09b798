"""Acceptance checks, one test per criterion.

Each test prints a ``PASS``/``FAIL`` line with the measured quantities.
``python tests/test_acceptance.py`` runs them all without pytest.
"""
import time
import tracemalloc
from pathlib import Path

import numpy as np
import pytest

from jano import bench
from jano.complexity import AnalyzerConfig
from jano.config import load_config
from jano.errors import BudgetInfeasibleError
from jano.dit import KVCacheStore, ToyDiT, cache_memory_report, full_forward, masked_forward
from jano.flow import MixtureTarget, latent_distance, oracle_velocity
from jano.latents import BlockGrid
from jano.pipeline import PipelineConfig, plain_loop, relative_l2, run_pipeline
from jano.scheduler import (LevelMap, ScheduleConfig, build_step_plan, classify_levels, estimate_cost, full_plan,
                            optimize_thresholds)

from oracles import brute_force_thresholds, dense_stale_forward
from test_flow import eps_to_v_errors

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def report(capsys, n, ok, detail, seconds):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail} [{seconds:.1f}s]"
    if capsys is None:
        print(line)
    else:
        with capsys.disabled():
            print("\n" + line)


def timed(fn):
    tic = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - tic


# --- 1: distance vanishes on a shared point-mass target -------------------------------------

def distance_nullity(pairs=1000, dim=8, seed=0):
    rng = np.random.default_rng(seed)
    times = np.round(np.arange(0.05, 0.9 + 1e-9, 0.05), 2)
    worst = 0.0
    for _ in range(pairs):
        target = MixtureTarget.point_mass(rng.normal(0, 3, dim))
        x0 = rng.standard_normal((2, dim))
        x1 = target.means[0]
        for t in times:
            va, vb = oracle_velocity(target, t * x1 + (1 - t) * x0, t)  # both paths in one batch
            worst = max(worst, abs(latent_distance(va, vb, x0[0], x0[1])))
    return worst


def test_1_distance_nullity(capsys):
    worst, sec = timed(distance_nullity)
    ok = worst <= 1e-9 and sec < 5
    report(capsys, 1, ok, f"max |D| = {worst:.2e} over 1000 pairs x 18 times", sec)
    assert worst <= 1e-9 and sec < 5


# --- 2: velocity constancy -----------------------------------------------------------------------

def constancy():
    c = load_config(CONFIGS / "constancy.yaml")
    _, flags = bench.constancy_experiment(c.constancy.dim, c.constancy.separation, c.constancy.component_std,
                                          c.constancy.trials, c.constancy.times, c.seed)
    ratio = max(f["same_std_over_mean"] for f in flags)
    cross = np.mean([f["cross_exceeds_same"] for f in flags])
    return ratio, cross, len(flags)


def test_2_velocity_constancy(capsys):
    (ratio, cross, n), sec = timed(constancy)
    ok = ratio <= 0.05 and cross >= 0.95 and n == 500 and sec < 30
    report(capsys, 2, ok, f"max same std/mean = {ratio:.4f}, cross > same in {cross:.1%} of {n}", sec)
    assert ok


# --- 3 and 4: recognition on the standard suite ---------------------------------------------------

@pytest.fixture(scope="module")
def recognition():
    cfg = load_config(CONFIGS / "standard_suite.yaml")
    specs = cfg.scene_specs()
    a = cfg.analyzer
    out = {}
    tic = time.perf_counter()
    for K in (5, 6, 7):
        n_perm = a.permutations if K == 5 else 1
        _, summary = bench.recognition_experiment(specs, cfg.trajectory.steps, K, a.block_size, cfg.seed, n_perm,
                                                  a.level_fractions, a.w_temporal, a.w_spatial,
                                                  bench.resolve_workers(cfg.workers))
        out[K] = summary
    return out, time.perf_counter() - tic


def test_3_early_recognition(recognition, capsys):
    out, sec = recognition
    parts, ok = [], sec < 120
    for K, s in out.items():
        gap = s["median_accuracy"] - s["median_baseline_accuracy"]
        ok &= s["scenes"] == 20 and s["median_accuracy"] >= 0.65 and gap >= 0.2
        parts.append(f"K={K}: {s['median_accuracy']:.3f} vs {s['median_baseline_accuracy']:.3f}")
    report(capsys, 3, ok, "median accuracy " + ", ".join(parts), sec)
    assert ok


def test_4_convergence_correlation(recognition, capsys):
    out, sec = recognition
    s = out[5]
    ok = s["rho_conv"] >= 0.6 and s["p_conv"] < 1e-3 and sec < 120
    report(capsys, 4, ok, f"rho = {s['rho_conv']:.3f}, p = {s['p_conv']:.1e} ({s['permutations']} permutations)",
           sec)
    assert ok


# --- 5: attention equivalence --------------------------------------------------------------

def attention_equivalence(patterns=200, N=1024, L=4, d=64, seed=0):
    rng = np.random.default_rng(seed)
    model = ToyDiT(4, d, 4, L, seed=seed)
    x_old = rng.standard_normal((N, 4)).astype(np.float32)
    cache = KVCacheStore(L, d)
    full_forward(model, x_old, 0.3, cache, np.ones(N, np.int8), 0)
    _, kv_old = dense_stale_forward(model, x_old, 0.3, np.arange(N))
    worst = 0.0
    for _ in range(patterns):
        levels = np.where(rng.random(N) < rng.uniform(0.05, 0.95), 1, 3).astype(np.int8)
        act, frz = np.flatnonzero(levels == 3), np.flatnonzero(levels == 1)
        if act.size == 0:
            continue
        x_new = rng.standard_normal((N, 4)).astype(np.float32)
        t = rng.uniform(0.3, 0.99)
        # level-3 rows are not written back, so the level-1 cache stays fixed across patterns
        out = masked_forward(model, x_new[act], act, cache, t, num_tokens=N, token_levels=levels)
        sub = {li: (frz, k[frz], v[frz]) for li, (k, v) in enumerate(kv_old)}
        ref, _ = dense_stale_forward(model, x_new, t, act, sub)
        worst = max(worst, float(np.abs(out - ref).max()))

    small = ToyDiT(4, 32, 4, 2, seed=1)
    grid = BlockGrid((4, 16, 16), (2, 8, 8))
    x0 = rng.standard_normal((4, 4, 16, 16))
    sched = ScheduleConfig(total_steps=20, warmup=4, cooldown=2)
    run, _ = run_pipeline(small, x0, full_plan(20, grid.num_blocks), PipelineConfig(sched, AnalyzerConfig(4)), grid)
    end_to_end = float(np.abs(run - plain_loop(small, x0, 20)).max())
    return worst, end_to_end


def test_5_attention_equivalence(capsys):
    (worst, e2e), sec = timed(attention_equivalence)
    ok = worst <= 1e-5 and e2e <= 1e-5 and sec < 120
    report(capsys, 5, ok, f"masked vs stale-KV oracle {worst:.1e} over 200 patterns, all-active vs plain {e2e:.1e}",
           sec)
    assert ok


# --- 6: near-linear speedup ------------------------------------------------------------------------

def count_query_flops(plan, grid, d, L):
    """Counting oracle: walk every step, active query and key."""
    sizes = grid.block_sizes()
    total = 0
    for k in range(plan.steps):
        n_active = sum(int(sizes[b]) for b in range(grid.num_blocks) if plan.active[k, b])
        for _ in range(L):
            total += n_active * grid.num_tokens * 4 * d
    return total


def speedup(N=4096, d=64, L=4, seed=0):
    rng = np.random.default_rng(seed)
    grid = BlockGrid((4, 32, 32), (2, 8, 8))
    sched = ScheduleConfig.preset("wan-1.3b")
    fractions, flops = [], []
    exact = True
    for _ in range(20):
        plan = build_step_plan(LevelMap(rng.integers(1, 4, grid.num_blocks).astype(np.int8)), sched)
        f = bench.query_flops(plan, grid, d, L)
        exact &= f == count_query_flops(plan, grid, d, L)
        fractions.append(estimate_cost(plan, grid).fraction)
        flops.append(f)
    full = bench.query_flops(full_plan(sched.total_steps, grid.num_blocks), grid, d, L)
    linear = np.allclose(np.array(flops) / full, fractions, rtol=0, atol=1e-12)

    timer = bench.StepTimer(ToyDiT(4, d, 4, L, seed=seed), N, seed=seed, repeats=5)
    ratio = timer(N // 4) / timer(N)
    return exact, linear, ratio


def test_6_near_linear_speedup(capsys):
    (exact, linear, ratio), sec = timed(speedup)
    ok = exact and linear and ratio <= 0.55 and sec < 300
    report(capsys, 6, ok, f"FLOP count exact={exact}, linear={linear}; 25% active wall ratio {ratio:.3f} at N=4096",
           sec)
    assert ok


# --- 7: threshold optimizer ------------------------------------------------------------------

def optimizer(maps=50, seed=0):
    rng = np.random.default_rng(seed)
    grid = BlockGrid((4, 32, 32), (2, 8, 8))
    matches, worst, feasible = 0, np.inf, 0
    for i in range(maps):
        cfg = ScheduleConfig.preset(["flux-1", "wan-1.3b", "wan-14b"][i % 3], -1)
        scores = rng.random(grid.num_blocks) ** rng.uniform(0.3, 3)
        budget = rng.uniform(0.3, 1.0)
        best = brute_force_thresholds(scores, budget, cfg, grid.block_sizes())
        try:
            s, m = optimize_thresholds(scores, budget, cfg, grid)
        except BudgetInfeasibleError:
            matches += best is None
            continue
        matches += best is not None and (s, m) == best[:2]
        cost = estimate_cost(build_step_plan(classify_levels(scores, cfg.with_thresholds(s, m)), cfg), grid).fraction
        feasible += 1
        worst = min(worst, cost / budget)
        assert cost <= budget + 1e-12
    return matches, feasible, worst


def test_7_threshold_optimizer(capsys):
    (matches, n, worst), sec = timed(optimizer)
    ok = matches == 50 and n > 0 and worst >= 0.95 and sec < 60
    report(capsys, 7, ok, f"{matches}/50 match exhaustive search ({n} feasible), min cost/budget {worst:.3f}", sec)
    assert ok


# --- 8: eps to v ------------------------------------------------------------------------------

def test_8_eps_to_v_order(capsys):
    tic = time.perf_counter()
    n_list = np.array([5, 9, 17])
    errs = eps_to_v_errors(n_list)
    order = np.polyfit(np.log(0.8 / (n_list - 1)), np.log(errs), 1)[0]
    sec = time.perf_counter() - tic
    ok = order >= 0.9 and sec < 30
    report(capsys, 8, ok, f"observed order {order:.3f}, errors " + ", ".join(f"{e:.2e}" for e in errs), sec)
    assert ok


# --- 9: end-to-end freezing quality -------------------------------------------------------------

def freezing_quality(random_draws=5):
    cfg = load_config(CONFIGS / "static_heavy.yaml")
    sched, acfg = cfg.schedule_config(), cfg.analyzer_config()
    tr = cfg.trajectory
    rows = []
    for i, spec in enumerate(cfg.scene_specs()):
        clean, run, field = bench.simulate_scene(spec, tr.steps, cfg.seed + i, tr.mode, acfg.block_size,
                                                 tr.sigma_scale)
        grid = BlockGrid(clean.spatial_shape, acfg.block_size)
        pcfg = PipelineConfig(sched, acfg)
        full, _ = run_pipeline(field, run.x0, full_plan(tr.steps, grid.num_blocks), pcfg, grid)
        out, st = run_pipeline(field, run.x0, None, pcfg, grid)
        fraction = estimate_cost(st.plan, grid).fraction
        err = relative_l2(out, full)
        # random masks with the same level counts cost exactly the same
        rng = np.random.default_rng(1000 + i)
        rand = []
        for _ in range(random_draws):
            lv = LevelMap(rng.permutation(st.levels.levels))
            plan = build_step_plan(lv, sched)
            assert estimate_cost(plan, grid).token_steps == st.token_steps
            r_out, _ = run_pipeline(field, run.x0, plan, pcfg, grid, lv)
            rand.append(relative_l2(r_out, full))
        rows.append((err, fraction, float(np.mean(rand))))
    return np.array(rows)


def test_9_freezing_quality(capsys):
    rows, sec = timed(freezing_quality)
    err, frac, rand = rows.T
    wins = int(np.sum(err <= rand))
    ok = err.max() <= 0.05 and frac.max() <= 0.55 and wins == len(rows) and sec < 300
    report(capsys, 9, ok, f"max rel L2 {err.max():.4f}, max token-step fraction {frac.max():.3f}, "
                          f"beats matched random on {wins}/{len(rows)} scenes", sec)
    assert ok


# --- 10: memory accounting -------------------------------------------------------------------------

def memory(n_total=1200, n_frozen=1000, d=64, L=4):
    model = ToyDiT(4, d, 4, L, seed=0)
    levels = np.full(n_total, 3, np.int8)
    levels[:n_frozen] = 1
    levels[: n_frozen // 3] = 2
    x = np.random.default_rng(0).standard_normal((n_total, 4))
    tracemalloc.start()
    try:
        before = tracemalloc.get_traced_memory()[0]
        cache = KVCacheStore(L, d)
        full_forward(model, x, 0.2, cache, levels, 1)
        grown = tracemalloc.get_traced_memory()[0] - before
    finally:
        tracemalloc.stop()
    reported = cache_memory_report(cache, num_tokens=n_total)["total_bytes"]
    return reported, n_frozen * d * 2 * 4 * L, grown


def test_10_memory_accounting(capsys):
    (reported, formula, grown), sec = timed(memory)
    ok = reported == formula and abs(grown - reported) <= 0.10 * reported
    report(capsys, 10, ok, f"reported {reported} B, formula {formula} B, measured growth {grown} B", sec)
    assert ok


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-s"]))
