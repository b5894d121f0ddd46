from __future__ import annotations

from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Any, Dict, Tuple

import yaml

from .latent_map import LatentMapConfig
from .normal_blocks import NoiseConfig
from .pipeline import AnchorConfig, EngineConfig, IterationPlan, PipelineParams, ScheduleConfig, TilingConfig
from .segmentation import SegmentationConfig
from .synth import SynthConfig


@dataclass
class AppConfig:
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    latent_map: LatentMapConfig = field(default_factory=LatentMapConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    fixed_trajectories: Tuple[int, ...] = ()

    def pipeline_params(self) -> PipelineParams:
        return PipelineParams(
            noise=self.noise,
            segmentation=self.segmentation,
            latent_map=self.latent_map,
            tiling=self.tiling,
            anchors=self.anchors,
            engine=self.engine,
            fixed_trajectories=tuple(int(t) for t in self.fixed_trajectories),
        )

    def plan(self) -> IterationPlan:
        return IterationPlan([tuple(float(v) for v in s) for s in self.schedule.steps])


_SECTIONS = ("noise", "segmentation", "latent_map", "tiling", "anchors", "engine", "schedule", "synth")


def load_config(path: str | Path) -> AppConfig:
    p = Path(path)
    if not p.exists():
        cfg = AppConfig()
        save_config(p, cfg)
        return cfg

    raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    cfg = AppConfig()
    defaults = AppConfig()

    for name in _SECTIONS:
        _apply_dataclass_updates(getattr(cfg, name), raw.get(name, {}) or {})
    cfg.fixed_trajectories = tuple(int(t) for t in raw.get("fixed_trajectories", []) or [])

    cfg.noise.sigma_dist = float(cfg.noise.sigma_dist)
    if not cfg.noise.sigma_dist > 0.0:
        cfg.noise.sigma_dist = defaults.noise.sigma_dist
    cfg.noise.sigma_prior = _sigma_vector(cfg.noise.sigma_prior, defaults.noise.sigma_prior)
    cfg.noise.sigma_smooth = _sigma_vector(cfg.noise.sigma_smooth, defaults.noise.sigma_smooth)

    cfg.engine.workers = max(1, int(cfg.engine.workers))
    cfg.engine.partitions = max(0, int(cfg.engine.partitions))
    cfg.engine.max_retries = max(0, int(cfg.engine.max_retries))
    cfg.engine.spill_mb = max(1, int(cfg.engine.spill_mb))
    cfg.engine.scratch = str(cfg.engine.scratch)

    cfg.tiling.tile_size = float(cfg.tiling.tile_size)
    if not cfg.tiling.tile_size > 0.0:
        cfg.tiling.tile_size = defaults.tiling.tile_size
    # overlap must stay below half a tile
    cfg.tiling.overlap = max(0.0, min(float(cfg.tiling.overlap), 0.49 * cfg.tiling.tile_size))

    if not float(cfg.anchors.spacing) > 0.0:
        cfg.anchors.spacing = defaults.anchors.spacing
    cfg.segmentation.window = max(1, int(cfg.segmentation.window))
    cfg.segmentation.min_region_px = max(1, int(cfg.segmentation.min_region_px))

    scene = str(cfg.synth.scene or "standard").strip().lower()
    cfg.synth.scene = scene if scene in {"standard", "canyon"} else "standard"

    return cfg


def save_config(path: str | Path, config: AppConfig) -> None:
    payload: Dict[str, Any] = {name: _plain(asdict(getattr(config, name))) for name in _SECTIONS}
    payload["fixed_trajectories"] = [int(t) for t in config.fixed_trajectories]
    p = Path(path)
    p.write_text(yaml.safe_dump(payload, sort_keys=False, allow_unicode=False), encoding="utf-8")


def _apply_dataclass_updates(target: Any, updates: Dict[str, Any]) -> None:
    for key, value in updates.items():
        if not hasattr(target, key):
            continue
        current = getattr(target, key)
        if is_dataclass(current) and isinstance(value, dict):
            _apply_dataclass_updates(current, value)
        elif isinstance(current, tuple) and isinstance(value, (list, tuple)):
            setattr(target, key, _as_tuple(value))
        else:
            setattr(target, key, value)


def _as_tuple(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return tuple(_as_tuple(v) for v in value)
    return value


def _plain(value: Any) -> Any:
    """Tuples to lists so safe_dump writes plain YAML sequences."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _sigma_vector(value: Any, default: Tuple[float, ...]) -> Tuple[float, ...]:
    try:
        vec = tuple(float(v) for v in value)
    except (TypeError, ValueError):
        return tuple(default)
    if len(vec) != 6 or any(not v > 0.0 for v in vec):
        return tuple(default)
    return vec

