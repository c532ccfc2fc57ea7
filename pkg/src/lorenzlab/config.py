"""
Pydantic models for experiment configuration files (TOML).
"""

from __future__ import annotations

import hashlib
import json
import sys
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import tomli_w
from pydantic import BaseModel, Field, field_validator, model_validator

from lorenzlab.flow_core import SYSTEMS

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class StageName(str, Enum):
    """Pipeline stages, in the order they usually run."""

    ORBIT = "orbit"
    LYAPUNOV = "lyapunov"
    NORMAL_SPECTRUM = "normal_spectrum"
    POINCARE_BOUND = "poincare_bound"
    SINGULARITY = "singularity"
    SPLITTING = "splitting"
    DOMINATION = "domination"
    SECTIONAL = "sectional"
    VOLUME = "volume"
    ATTRACTION = "attraction"
    CHECKLIST = "checklist"
    ENTROPY = "entropy"
    DISK_VOLUME = "disk_volume"
    EXPANSIVENESS = "expansiveness"
    PESIN = "pesin"
    RECURRENCES = "recurrences"
    CERTIFY = "certify"
    SHADOW = "shadow"
    CENSUS = "census"


# Stages whose context must already exist earlier in the pipeline.
PREREQUISITES: dict[StageName, tuple[StageName, ...]] = {
    StageName.POINCARE_BOUND: (StageName.ORBIT,),
    StageName.SPLITTING: (StageName.ORBIT,),
    StageName.DOMINATION: (StageName.SPLITTING,),
    StageName.SECTIONAL: (StageName.SPLITTING,),
    StageName.VOLUME: (StageName.SPLITTING,),
    StageName.ATTRACTION: (StageName.ORBIT,),
    StageName.DISK_VOLUME: (StageName.SPLITTING,),
    StageName.PESIN: (StageName.SPLITTING,),
    StageName.RECURRENCES: (StageName.PESIN,),
    StageName.CERTIFY: (StageName.PESIN,),
    StageName.SHADOW: (StageName.RECURRENCES,),
    StageName.CENSUS: (StageName.SHADOW,),
}


# ----- Models -----


class SystemSpec(BaseModel):
    """Which built-in system to build, and its parameters."""

    name: str = "lorenz"
    params: dict[str, Any] = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def _known_system(cls, value: str) -> str:
        if value not in SYSTEMS:
            raise ValueError(f"unknown system '{value}' (known: {', '.join(sorted(SYSTEMS))})")
        return value


class StageSpec(BaseModel):
    name: StageName
    params: dict[str, Any] = Field(default_factory=dict)


class Budgets(BaseModel):
    max_seconds: Optional[float] = Field(default=None, gt=0)
    max_iterates: Optional[int] = Field(default=None, ge=1)  # point-iterates for spanning counts
    max_vertices: int = Field(default=10**6, ge=3)
    max_samples: Optional[int] = Field(default=None, ge=1)


class ExperimentConfig(BaseModel):
    """A full experiment: one system, shared settings, and an ordered stage list."""

    system: SystemSpec = Field(default_factory=SystemSpec)
    seed: int = Field(default=0, ge=0)
    tol: float = Field(default=1e-9, gt=0, le=1e-3)
    threads: Optional[int] = Field(default=None, ge=1, le=256)  # None: every available core
    output: str = "runs/default"
    x0: Optional[list[float]] = None
    budgets: Budgets = Field(default_factory=Budgets)
    stages: list[StageSpec] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_order(self) -> "ExperimentConfig":
        seen: set[StageName] = set()
        for stage in self.stages:
            missing = [p.value for p in PREREQUISITES.get(stage.name, ()) if p not in seen]
            if missing:
                raise ValueError(f"stage '{stage.name.value}' needs {', '.join(missing)} earlier in the pipeline")
            seen.add(stage.name)
        return self

    def stage_names(self) -> list[str]:
        return [s.name.value for s in self.stages]


# ----- File helpers -----


def parse_config(text: str) -> ExperimentConfig:
    return ExperimentConfig.model_validate(tomllib.loads(text))


def load_config(path: Path) -> ExperimentConfig:
    return parse_config(path.read_text(encoding="utf-8"))


def dump_config(config: ExperimentConfig) -> str:
    return tomli_w.dumps(config.model_dump(mode="json", exclude_none=True))


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def apply_overrides(
    config: ExperimentConfig,
    *,
    seed: Optional[int] = None,
    tol: Optional[float] = None,
    output: Optional[Path] = None,
    threads: Optional[int] = None,
) -> ExperimentConfig:
    """Return a re-validated copy with CLI flags applied."""
    data = config.model_dump(mode="json")
    if seed is not None:
        data["seed"] = seed
    if tol is not None:
        data["tol"] = tol
    if output is not None:
        data["output"] = str(output)
    if threads is not None:
        data["threads"] = threads
    return ExperimentConfig.model_validate(data)
