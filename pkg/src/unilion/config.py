"""Run configuration: a flat JSON document of keys mirroring :class:`RunConfig`."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import OPERATORS, BackboneConfig
from .losses import TASKS, LossWeights
from .scene import SceneSpec, spec_dict
from .voxel import VoxelGrid

PRECISIONS = {"float64": np.float64, "float32": np.float32}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    grid_origin: tuple = (-12.8, -12.8, -3.0)
    voxel_size: tuple = (0.4, 0.4, 0.2)
    grid_extent: tuple = (64, 64, 32)
    channels: int = 16
    windows: list = field(default_factory=lambda: [[13, 13, 32], [13, 13, 16]])
    group_sizes: list = field(default_factory=lambda: [256, 128])
    operator: str = "selective"
    chunk: int | None = 64
    fg_ratio: float = 0.2
    lidar: bool = True
    camera: bool = True
    temporal: bool = True
    top_k: int = 4
    memory: int = 3
    seed: int = 0
    precision: str = "float64"
    frames: int = 4
    steps: int = 200
    lr: float = 0.02
    tasks: list = field(default_factory=lambda: ["det", "occ"])
    loss_weights: list = field(default_factory=lambda: [1.0, 0.5, 1.0, 1.0, 1.0])
    lengths: list = field(default_factory=lambda: [1024, 2048, 4096])
    bench_channels: int = 16
    bench_repeats: int = 5
    gradcheck_directions: int = 64
    scene: SceneSpec = field(default_factory=SceneSpec)

    def __post_init__(self):
        try:
            self._validate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def _validate(self):
        self.grid_origin = tuple(float(v) for v in self.grid_origin)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        self.grid_extent = tuple(int(v) for v in self.grid_extent)
        self.windows = [[int(v) for v in w] for w in self.windows]
        self.group_sizes = [int(g) for g in self.group_sizes]
        if not (self.lidar or self.camera):
            raise ConfigError("at least one of lidar/camera must be enabled")
        if self.operator not in OPERATORS:
            raise ConfigError(f"operator must be one of {OPERATORS}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if len(self.windows) != len(self.group_sizes) or not self.windows:
            raise ConfigError("windows and group_sizes need one entry per block")
        if any(len(w) != 3 for w in self.windows):
            raise ConfigError("each window is [sx, sy, sz]")
        if self.channels < 1:
            raise ConfigError("channels must be positive")
        if self.camera and self.scene.feature_channels != self.channels:
            raise ConfigError("camera raster feature_channels must equal channels")
        if self.camera and self.top_k > self.scene.depth_bins:
            raise ConfigError("top_k exceeds the depth bin count")
        if self.top_k < 1 or self.memory < 0 or self.frames < 0 or self.steps < 0 or self.lr < 0:
            raise ConfigError("top_k must be >= 1; memory, frames, steps and lr non-negative")
        bad = set(self.tasks) - set(TASKS)
        if bad:
            raise ConfigError(f"unknown tasks {sorted(bad)}")
        if not self.tasks:
            raise ConfigError("need at least one task")
        if ("map" in self.tasks or "occ" in self.tasks) and "det" not in self.tasks:
            raise ConfigError("map/occ losses require the det task")
        if len(self.loss_weights) != 5:
            raise ConfigError("loss_weights has five entries")
        if sorted(self.lengths) != list(self.lengths) or min(self.lengths, default=1) < 1:
            raise ConfigError("bench lengths must be positive and increasing")
        self.grid  # validates extents and sizes
        self.backbone  # validates block settings
        LossWeights(*self.loss_weights)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def grid(self) -> VoxelGrid:
        return VoxelGrid(self.grid_origin, self.voxel_size, self.grid_extent)

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig.build(self.channels, self.windows, self.group_sizes, self.operator,
                                    self.chunk, self.fg_ratio)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(*self.loss_weights)

    @property
    def regime(self) -> str:
        return ("L" if self.lidar else "") + ("C" if self.camera else "") + ("T" if self.temporal else "")

    def with_regime(self, regime: str) -> "RunConfig":
        """Same settings under another availability regime such as ``"LT"``."""
        regime = regime.upper()
        if set(regime) - set("LCT"):
            raise ConfigError(f"bad regime {regime!r}")
        return dataclasses.replace(self, lidar="L" in regime, camera="C" in regime, temporal="T" in regime)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "scene"}
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        d.update(spec_dict(self.scene))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        own = {f.name for f in dataclasses.fields(cls)} - {"scene"}
        scene_keys = set(SceneSpec.__dataclass_fields__)
        unknown = set(d) - own - scene_keys
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            scene = SceneSpec.from_dict({k: v for k, v in d.items() if k in scene_keys})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"scene settings: {e}") from e
        try:
            return cls(scene=scene, **{k: v for k, v in d.items() if k in own})
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        return cls.from_dict(data)
