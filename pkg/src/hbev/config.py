"""Run configuration: one validated document covering every module's parameters.

Loaded from TOML or JSON; unknown keys are rejected. ``config_hash`` is the
SHA-256 of the canonical JSON form and is recorded in every manifest.
"""
from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .bevlift import FrustumConfig
from .gridmap import GridSpec
from .hindsight import FusionPolicy
from .synthworld import SensorSpec


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridConfig(_Section):
    extent: float = Field(100.0, gt=0)
    resolution: float = Field(0.2, gt=0)

    def spec(self) -> GridSpec:
        return GridSpec.from_extent(self.extent, self.resolution)


class FusionConfig(_Section):
    confidence_threshold: float = Field(0.5, ge=0, le=1)
    window: float = Field(60.0, gt=0)
    min_travel_distance: float = Field(0.2, ge=0)

    def policy(self) -> FusionPolicy:
        return FusionPolicy(self.confidence_threshold, self.window)


class FrustumSection(_Section):
    d_min: float = Field(4.0, gt=0)
    d_max: float = 50.0
    spacing: float = Field(0.2, gt=0)
    feature_height: int = Field(24, ge=1)
    feature_width: int = Field(32, ge=1)
    downsample_factor: int = Field(16, ge=1)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be smaller than d_max")
        return self

    def frustum(self) -> FrustumConfig:
        return FrustumConfig(**self.model_dump())


class WorldConfig(_Section):
    seed: int = 0
    extent: float = Field(100.0, gt=0)
    n_obstacles: int = Field(10, ge=0)
    n_bumps: int = Field(8, ge=0)
    trajectory: Literal["loop", "line", "figure8"] = "loop"
    duration: float = Field(120.0, gt=0)
    path_radius: float | None = Field(None, gt=0)
    rate: float = Field(1.0, gt=0)  # dataset steps per second


class SensorConfig(_Section):
    channels: int = Field(16, ge=1)
    vertical_fov: tuple[float, float] = (-25.0, 5.0)
    azimuth_resolution: float = Field(0.5, gt=0)
    max_range: float = Field(40.0, gt=0)
    min_range: float = Field(0.5, ge=0)
    rate: float = Field(10.0, gt=0)
    mount: tuple[float, float, float] = (0.0, 0.0, 1.5)
    beam_divergence: float = Field(0.003, ge=0)
    march_step: float = Field(0.1, gt=0)
    reliability_scale: float = Field(5.0, gt=0)
    step_threshold: float = Field(0.3, ge=0)

    def sensor(self) -> SensorSpec:
        return SensorSpec(**self.model_dump())


class MetricsConfig(_Section):
    fatal_threshold: float = Field(0.9, ge=0, le=1)
    bin_width: float = Field(1.0, gt=0)


class WeightsConfig(_Section):
    n_bins: int = Field(100, ge=1)
    elevation_scale: float = Field(0.05, gt=0)


class RunConfig(_Section):
    grid: GridConfig = GridConfig()
    fusion: FusionConfig = FusionConfig()
    frustum: FrustumSection = FrustumSection()
    world: WorldConfig = WorldConfig()
    sensor: SensorConfig = SensorConfig()
    metrics: MetricsConfig = MetricsConfig()
    weights: WeightsConfig = WeightsConfig()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def updated(self, section: str, **values) -> "RunConfig":
        """Copy with some fields of one section replaced (``None`` values are ignored)."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        current = getattr(self, section).model_dump()
        current.update(values)
        return self.model_validate({**self.model_dump(), section: current})


def load_config(path: str | Path | None) -> RunConfig:
    """Read a ``.toml`` or ``.json`` config; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        data = tomllib.loads(text)
    elif path.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        raise ValueError(f"{path}: config must be .toml or .json")
    return RunConfig.model_validate(data)
