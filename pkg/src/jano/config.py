"""Run-config document (YAML or JSON) and its schema.

Unknown keys are rejected. Validation errors carry the dotted key path.
"""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .complexity import AnalyzerConfig
from .errors import ConfigError
from .scenes import Region, SceneSpec
from .scheduler import PRESET_WARMUP, PRESETS, ScheduleConfig, default_cooldown
from .suite import make_scene


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RegionCfg(_Strict):
    box: tuple[int, int, int, int, int, int]
    kind: Literal["constant", "linear-ramp", "sinusoid", "checkerboard", "moving-sinusoid"]
    amplitude: float = 1.0
    freq: tuple[float, float] = (0.0, 0.0)
    period: int = 2
    velocity: float = 0.0
    offset: float = 0.0


class SuiteCfg(_Strict):
    kind: Literal["standard", "static-heavy"] = "standard"
    count: int = Field(20, ge=1)
    first: int = Field(0, ge=0)


class SceneCfg(_Strict):
    canvas: tuple[int, int, int, int]
    seed: int = 0
    phase_jitter: float = 0.125
    regions: list[RegionCfg] = Field(default_factory=list)


class TrajectoryCfg(_Strict):
    steps: int = Field(50, ge=2)
    mode: Literal["exact", "oracle-rollout"] = "exact"
    sigma_scale: float = Field(0.5, ge=0)


class AnalyzerCfg(_Strict):
    warmup: Optional[int] = Field(None, ge=2)
    w_temporal: float = 0.7
    w_spatial: float = 0.3
    block_size: tuple[int, int, int] = (2, 8, 8)
    level_fractions: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    permutations: int = Field(10_000, ge=1)


class ScheduleCfg(_Strict):
    preset: Optional[Literal["flux-1", "wan-1.3b", "wan-14b"]] = "wan-1.3b"
    row: int = -1
    warmup: Optional[int] = None
    cooldown: Optional[int] = None
    static_threshold: Optional[float] = None
    static_interval: Optional[int] = None
    moderate_threshold: Optional[float] = None
    moderate_interval: Optional[int] = None
    budget: Optional[float] = Field(None, gt=0, le=1)


class ModelCfg(_Strict):
    velocity: Literal["dit", "oracle"] = "dit"
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    seed: int = 0


class AblateCfg(_Strict):
    mask_ratios: list[float] = Field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6])
    seed: int = 0
    measure_speed: bool = True


class ConstancyCfg(_Strict):
    dim: int = 8
    separation: float = 200.0
    component_std: float = 0.05
    trials: int = 20
    times: list[float] = Field(default_factory=lambda: [round(0.05 * i, 2) for i in range(11)])


class RunConfig(_Strict):
    scene: Optional[SceneCfg] = None
    suite: Optional[SuiteCfg] = None
    trajectory: TrajectoryCfg = Field(default_factory=TrajectoryCfg)
    analyzer: AnalyzerCfg = Field(default_factory=AnalyzerCfg)
    schedule: ScheduleCfg = Field(default_factory=ScheduleCfg)
    model: ModelCfg = Field(default_factory=ModelCfg)
    ablate: AblateCfg = Field(default_factory=AblateCfg)
    constancy: ConstancyCfg = Field(default_factory=ConstancyCfg)
    seed: int = 0
    workers: int = Field(1, ge=1)
    output_dir: Optional[str] = None

    # --- builders ----------------------------------------------------------

    def scene_specs(self):
        if self.suite is not None:
            kw = {"seed_base": 1000} if self.suite.kind == "standard" else {
                "fractions": (0.5, 0.25, 0.25), "seed_base": 5000}
            if self.scene is not None:
                kw["canvas"] = self.scene.canvas
                kw["block"] = self.analyzer.block_size
            return [make_scene(i, **kw)[0] for i in range(self.suite.first, self.suite.first + self.suite.count)]
        if self.scene is None:
            raise ConfigError("config needs either 'scene' or 'suite'")
        regions = tuple(Region(**r.model_dump()) for r in self.scene.regions)
        return [SceneSpec(self.scene.canvas, regions, self.scene.seed, self.scene.phase_jitter)]

    def analyzer_config(self):
        a = self.analyzer
        warmup = a.warmup if a.warmup is not None else self.schedule_config().warmup
        return AnalyzerConfig(warmup, a.w_temporal, a.w_spatial, a.block_size)

    def schedule_config(self):
        s = self.schedule
        T = self.trajectory.steps
        if s.preset is not None:
            base = ScheduleConfig.preset(s.preset, s.row, total_steps=T, warmup=s.warmup, cooldown=s.cooldown)
        else:
            base = ScheduleConfig(total_steps=T, warmup=s.warmup if s.warmup is not None else 6,
                                  cooldown=s.cooldown if s.cooldown is not None else default_cooldown(T))
        over = {k: getattr(s, k) for k in ("static_threshold", "static_interval",
                                           "moderate_threshold", "moderate_interval")
                if getattr(s, k) is not None}
        return ScheduleConfig(**{**base.__dict__, **over}) if over else base


def _loc(err):
    return ".".join(str(p) for p in err["loc"])


def parse_config(data):
    """Validate a mapping into a :class:`RunConfig`, raising :class:`ConfigError`."""
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping at the top level")
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        msgs = [f"{_loc(e)}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid config: " + "; ".join(msgs)) from None
    try:
        cfg.schedule_config()
        cfg.analyzer_config()
        if cfg.scene is not None or cfg.suite is not None:
            cfg.scene_specs()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return cfg


def load_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from None
    return parse_config(data or {})


__all__ = ["RunConfig", "parse_config", "load_config", "PRESETS", "PRESET_WARMUP"]
