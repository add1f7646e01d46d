"""
Pipeline Configuration for LinkSmith
====================================

One validated configuration object for the whole pipeline. Built-in defaults
are overridden by a JSON config file, which is overridden by command-line
flags.

Features:
- Ingest, SDF and symmetry settings
- Composition of the contact, reward, search and joint estimation configs
- Ablation switches (topology mode, pivot anchor)
- Unknown keys rejected at every level

Author: LinkSmith Development Team
Date: 2024
"""

import json
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Union

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from contact_graph import ContactConfig
from joint_estimator import DwCavlConfig
from topology_search import RewardConfig, SearchConfig


class ConfigError(ValueError):
    """Config file is missing, not JSON, or fails validation."""


class IngestSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    min_vertices: int = Field(10, ge=1)
    min_spread: float = Field(1e-3, gt=0)
    strict: bool = False
    voxel_resolution: int = Field(64, ge=4)


class SdfSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    resolution: int = Field(96, ge=16)
    padding_fraction: float = Field(0.1, gt=0)
    cache_dir: Optional[str] = None
    validate_samples: int = Field(1000, ge=0)


class SymmetrySettings(BaseModel):
    """Chamfer threshold is threshold_fraction * diagonal^2 unless given absolutely."""
    model_config = ConfigDict(extra="forbid")

    samples: int = Field(2048, ge=16)
    threshold_fraction: float = Field(1e-3, ge=0)
    threshold: Optional[float] = Field(None, ge=0)
    seed: int = 0

    def threshold_for(self, diagonal: float) -> float:
        return self.threshold if self.threshold is not None else self.threshold_fraction * diagonal ** 2


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ingest: IngestSettings = Field(default_factory=IngestSettings)
    sdf: SdfSettings = Field(default_factory=SdfSettings)
    symmetry: SymmetrySettings = Field(default_factory=SymmetrySettings)
    contact: ContactConfig = Field(default_factory=ContactConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    search: SearchConfig = Field(default_factory=SearchConfig)
    dwcavl: DwCavlConfig = Field(default_factory=DwCavlConfig)
    topology: Literal["mcts", "bfs", "exhaustive"] = "mcts"
    anchor: bool = True
    threads: int = Field(1, ge=1)
    mesh_mode: Literal["copy", "reference"] = "copy"
    output_dir: str = "linksmith_out"
    robot_name: str = Field("linksmith", min_length=1)
    type_prior: Optional[str] = None


def _deep_merge(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    """Defaults, optionally overridden by a JSON file."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e
    try:
        config = PipelineConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e
    logger.debug(f"Loaded config from {path}")
    return config


def apply_overrides(config: PipelineConfig, overrides: Mapping[str, Any]) -> PipelineConfig:
    """Nested overrides (e.g. {"search": {"max_iterations": 50}}); None values are ignored."""
    cleaned = {k: v for k, v in overrides.items() if v is not None}
    try:
        return PipelineConfig.model_validate(_deep_merge(config.model_dump(), cleaned))
    except ValidationError as e:
        raise ConfigError(f"invalid override: {e}") from e


def with_seed(config: PipelineConfig, seed: int) -> PipelineConfig:
    """Propagate one seed to every seeded component."""
    return apply_overrides(config, {
        "contact": {"seed": seed},
        "search": {"rng_seed": seed},
        "dwcavl": {"seed": seed},
        "symmetry": {"seed": seed},
    })
