"""
From scores to a step plan
==========================

Scores become three convergence levels, and levels become a boolean plan over
steps and blocks: every block is computed during warm-up and cool-down, and in
between static and moderate blocks only refresh on their own intervals. The
threshold optimizer picks the most generous levels that fit a compute budget.
"""

import numpy as np

from jano.latents import BlockGrid
from jano.scheduler import ScheduleConfig, build_step_plan, classify_levels, estimate_cost, optimize_thresholds

cfg = ScheduleConfig.preset("wan-1.3b")
print(f"static <= {cfg.static_threshold} every {cfg.static_interval} steps, "
      f"moderate <= {cfg.moderate_threshold} every {cfg.moderate_interval}, "
      f"warm-up {cfg.warmup}, cool-down {cfg.cooldown}")

# one block per level, first 20 steps; '#' computed, '.' frozen
plan = build_step_plan(np.array([1, 2, 3]), cfg)
for b, name in enumerate(("static", "moderate", "active")):
    print(f"{name:<9}", "".join("#" if a else "." for a in plan.active[:20, b]))

grid = BlockGrid((4, 32, 32), (2, 8, 8))
rng = np.random.default_rng(0)
scores = rng.random(grid.num_blocks) ** 2  # skewed toward simple blocks
levels = classify_levels(scores, cfg)
est = estimate_cost(build_step_plan(levels, cfg), grid)
print("level counts with preset thresholds:", levels.counts(), f"token-step fraction {est.fraction:.3f}")

# fit thresholds to a budget instead
for budget in (0.9, 0.6, 0.4):
    s, m = optimize_thresholds(scores, budget, cfg, grid)
    lv = classify_levels(scores, cfg.with_thresholds(s, m))
    cost = estimate_cost(build_step_plan(lv, cfg), grid).fraction
    print(f"budget {budget:.2f}: thresholds ({s:+.3f}, {m:+.3f}) -> {lv.counts()}, cost {cost:.3f}")
