"""
End-to-end: warm up, analyze, freeze, refine
============================================

The velocity model here is the closed-form per-block Gaussian field, so a full
50-step run is a meaningful reference. The convergence-aware run analyzes the
warm-up latents, freezes simple blocks between refreshes and finishes with a
full cool-down. A random mask with the same level counts costs exactly the
same and serves as the control.
"""

import numpy as np

from jano.bench import simulate_scene
from jano.complexity import AnalyzerConfig
from jano.latents import BlockGrid
from jano.pipeline import PipelineConfig, relative_l2, run_pipeline
from jano.scheduler import LevelMap, ScheduleConfig, build_step_plan, estimate_cost, full_plan
from jano.suite import static_heavy_suite

sched = ScheduleConfig.preset("wan-1.3b")
acfg = AnalyzerConfig(6, block_size=(2, 8, 8))
cfg = PipelineConfig(sched, acfg)

spec = static_heavy_suite(1)[0]
clean, run, field = simulate_scene(spec, 50, seed=0, mode="oracle-rollout", block_size=acfg.block_size)
grid = BlockGrid(clean.spatial_shape, acfg.block_size)

full, full_state = run_pipeline(field, run.x0, full_plan(50, grid.num_blocks), cfg, grid)
out, state = run_pipeline(field, run.x0, None, cfg, grid)
est = estimate_cost(state.plan, grid)
print("levels:", state.levels.counts())
print(f"token-step fraction {est.fraction:.3f}, relative L2 vs full run {relative_l2(out, full):.4f}")

rng = np.random.default_rng(0)
errs = []
for _ in range(5):
    lv = LevelMap(rng.permutation(state.levels.levels))
    r_out, _ = run_pipeline(field, run.x0, build_step_plan(lv, sched), cfg, grid, lv)
    errs.append(relative_l2(r_out, full))
print(f"random masks at the same cost: relative L2 {np.mean(errs):.4f} (+/- {np.std(errs):.4f})")

# where the time went
by_phase = {}
for r in state.timing:
    by_phase[r["phase"]] = by_phase.get(r["phase"], 0.0) + r["ms"]
print("milliseconds by phase:", {k: round(v, 1) for k, v in by_phase.items()}, f"of {state.wall_ms:.1f} wall")
