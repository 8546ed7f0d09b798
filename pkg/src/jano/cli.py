"""``jano simulate|analyze|run|ablate|constancy --config <path> --out <dir>``.

Exit codes: 0 success, 2 config or schema error, 3 numeric or invariant
violation, 4 infeasible budget.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .config import load_config
from .errors import (BudgetInfeasibleError, ConfigError, CorrelationUndefinedError, FormatError,
                     InvalidInputError, InvalidStateError, JanoError, NumericError, SingularityError)
from .latents import LatentTensor, save_latent

log = logging.getLogger("jano")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_BUDGET = 0, 2, 3, 4


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_csv(path, rows, columns=None):
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def write_manifest(out, command, cfg_path, cfg, timing_files=()):
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(out))] = sha256_file(p)
    write_json(out / "manifest.json", {
        "command": command,
        "config": str(cfg_path),
        "config_sha256": sha256_file(cfg_path),
        "seed": cfg.seed,
        "files": files,
        # wall-clock measurements differ between reruns
        "timing_dependent": sorted(timing_files),
    })


# --- commands ----------------------------------------------------------------

def cmd_simulate(cfg, out, workers):
    specs = cfg.scene_specs()
    tr = cfg.trajectory
    block = cfg.analyzer.block_size
    index = []
    for i, spec in enumerate(specs):
        clean, run, _ = bench.simulate_scene(spec, tr.steps, cfg.seed + i, tr.mode, block, tr.sigma_scale)
        d = out / f"scene_{i:03d}"
        (d / "steps").mkdir(parents=True, exist_ok=True)
        save_latent(clean, d / "clean.jlat")
        save_latent(LatentTensor(run.x0), d / "x0.jlat")
        for k in range(1, run.steps + 1):
            save_latent(LatentTensor(run.step(k)), d / "steps" / f"step_{k:03d}.jlat")
        write_csv(d / "times.csv", [{"step": k + 1, "t": float(t)} for k, t in enumerate(run.times)])
        index.append({"scene": i, "canvas": list(spec.canvas), "regions": len(spec.regions),
                      "steps": run.steps, "mode": tr.mode, "seed": cfg.seed + i})
    write_json(out / "summary.json", {"experiment": "simulate", "scenes": index})
    return []


def cmd_analyze(cfg, out, workers):
    a = cfg.analyzer
    acfg = cfg.analyzer_config()
    rows, summary = bench.recognition_experiment(
        cfg.scene_specs(), cfg.trajectory.steps, acfg.warmup, a.block_size, cfg.seed, a.permutations,
        a.level_fractions, a.w_temporal, a.w_spatial, workers)
    write_csv(out / "blocks.csv", rows)
    acc_rows = [{"scene": i, "analyzer_accuracy": x, "baseline_accuracy": y}
                for i, (x, y) in enumerate(zip(summary["accuracy"], summary["baseline_accuracy"]))]
    write_csv(out / "accuracy.csv", acc_rows)
    write_json(out / "summary.json", {"experiment": "analyze", **summary})
    log.info("rho(conv)=%.3f rho(fft)=%.3f median accuracy %.3f vs baseline %.3f",
             summary["rho_conv"], summary["rho_fft"], summary["median_accuracy"],
             summary["median_baseline_accuracy"])
    return []


def _model_for(cfg, spec):
    m = cfg.model
    if m.velocity == "oracle":
        return None
    return bench.suite_toy_model(spec.canvas[0], m.d_model, m.n_heads, m.n_layers, m.seed)


def cmd_run(cfg, out, workers):
    specs = cfg.scene_specs()
    tr = cfg.trajectory
    sched, acfg = cfg.schedule_config(), cfg.analyzer_config()
    mode = tr.mode if cfg.model.velocity == "dit" else "oracle-rollout"
    timing = []
    summaries = []
    for i, spec in enumerate(specs):
        final, state, summary = bench.run_experiment(
            spec, sched, acfg, tr.steps, cfg.seed + i, mode, tr.sigma_scale,
            _model_for(cfg, spec), cfg.schedule.budget)
        d = out / f"scene_{i:03d}"
        d.mkdir(parents=True, exist_ok=True)
        save_latent(LatentTensor(final), d / "final.jlat")
        state.plan.to_csv(d / "plan.csv")
        write_csv(d / "levels.csv", [{"block": b, "level": int(lv)} for b, lv in enumerate(state.levels.levels)])
        state.write_timing_csv(d / "timing.csv")
        timing.append(str((d / "timing.csv").relative_to(out)))
        summaries.append({"scene": i, **summary})
    rows = [{k: v for k, v in s.items() if k != "levels"} for s in summaries]
    write_csv(out / "runs.csv", rows)
    timing.append("runs.csv")
    write_json(out / "summary.json", {"experiment": "run", "scenes": summaries})
    timing.append("summary.json")
    return timing


def cmd_ablate(cfg, out, workers):
    ab = cfg.ablate
    tr = cfg.trajectory
    specs = cfg.scene_specs()
    model = _model_for(cfg, specs[0]) if ab.measure_speed else None
    rows, summary = bench.ablation_experiment(
        specs, ab.mask_ratios, cfg.schedule_config(), cfg.analyzer_config(), tr.steps, cfg.seed, ab.seed,
        tr.sigma_scale, model, workers)
    write_csv(out / "ablation.csv", rows)
    write_json(out / "summary.json", {"experiment": "ablate", **summary})
    return ["ablation.csv", "summary.json"] if model is not None else []


def cmd_constancy(cfg, out, workers):
    c = cfg.constancy
    rows, flags = bench.constancy_experiment(c.dim, c.separation, c.component_std, c.trials, c.times, cfg.seed)
    write_csv(out / "profiles.csv", rows)
    write_csv(out / "flags.csv", flags)
    ratio = [f["same_std_over_mean"] for f in flags]
    write_json(out / "summary.json", {
        "experiment": "constancy",
        "trials": c.trials,
        "point_mass_flat": all(f["point_mass_flat"] for f in flags),
        "max_same_std_over_mean": max(ratio),
        "cross_exceeds_same": sum(f["cross_exceeds_same"] for f in flags),
        "cross_grows": sum(f["cross_grows"] for f in flags),
    })
    return []


COMMANDS = {
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "constancy": cmd_constancy,
}


def build_parser():
    p = argparse.ArgumentParser(prog="jano", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="YAML or JSON run config")
    p.add_argument("--out", help="output directory (defaults to output_dir in the config)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, help="worker processes (JANO_WORKERS wins)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.model_copy(update={"seed": args.seed})
        out_dir = args.out or cfg.output_dir
        if not out_dir:
            raise ConfigError("no output directory: pass --out or set output_dir")
        workers = bench.resolve_workers(args.workers if args.workers is not None else cfg.workers)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        timing_files = COMMANDS[args.command](cfg, out, workers)
        write_manifest(out, args.command, Path(args.config), cfg, timing_files)
    except (ConfigError, FormatError) as exc:
        print(f"jano: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetInfeasibleError as exc:
        print(f"jano: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (NumericError, InvalidStateError, CorrelationUndefinedError, SingularityError,
            InvalidInputError, FloatingPointError) as exc:
        print(f"jano: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except JanoError as exc:
        print(f"jano: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
