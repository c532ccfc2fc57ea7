from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
import json
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from lorenzlab.entropy import DiskMesh

CSV_FLOAT_FORMAT = "%.10g"


@dataclass
class StageRecord:
    """What one stage did: timing, gate verdict and the files it wrote."""

    name: str
    wall_time: float = 0.0
    passed: Optional[bool] = None  # None: the stage has no gate
    artifacts: list[str] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)
    witness: Optional[str] = None
    error: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "wall_time": self.wall_time,
            "passed": self.passed,
            "artifacts": self.artifacts,
            "summary": self.summary,
            "witness": self.witness,
            "error": self.error,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "StageRecord":
        return StageRecord(
            name=str(data["name"]),
            wall_time=float(data.get("wall_time", 0.0)),
            passed=data.get("passed"),
            artifacts=[str(a) for a in data.get("artifacts", [])],
            summary=dict(data.get("summary", {})),
            witness=data.get("witness"),
            error=data.get("error"),
        )


@dataclass
class RunManifest:
    config_hash: str
    version: str
    system: str
    seed: int
    tol: float
    created_at: str
    stages: list[StageRecord] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    status: str = "running"
    exit_code: int = 0
    failed_stage: Optional[str] = None
    skipped: list[str] = field(default_factory=list)

    @staticmethod
    def new(*, config_hash: str, version: str, system: str, seed: int, tol: float) -> "RunManifest":
        return RunManifest(
            config_hash=config_hash,
            version=version,
            system=system,
            seed=seed,
            tol=tol,
            created_at=datetime.now().isoformat(timespec="seconds"),
        )

    def stage(self, name: str) -> Optional[StageRecord]:
        for record in self.stages:
            if record.name == name:
                return record
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "version": self.version,
            "system": self.system,
            "seed": self.seed,
            "tol": self.tol,
            "created_at": self.created_at,
            "stages": [s.to_dict() for s in self.stages],
            "artifacts": self.artifacts,
            "status": self.status,
            "exit_code": self.exit_code,
            "failed_stage": self.failed_stage,
            "skipped": self.skipped,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "RunManifest":
        return RunManifest(
            config_hash=str(data["config_hash"]),
            version=str(data.get("version", "")),
            system=str(data.get("system", "")),
            seed=int(data.get("seed", 0)),
            tol=float(data.get("tol", 0.0)),
            created_at=str(data.get("created_at", "")),
            stages=[StageRecord.from_dict(s) for s in data.get("stages", [])],
            artifacts=[str(a) for a in data.get("artifacts", [])],
            status=str(data.get("status", "")),
            exit_code=int(data.get("exit_code", 0)),
            failed_stage=data.get("failed_stage"),
            skipped=[str(s) for s in data.get("skipped", [])],
        )


@dataclass(frozen=True)
class RunPaths:
    run_dir: Path
    manifest_json: Path
    config_toml: Path
    events_jsonl: Path

    def artifact(self, name: str) -> Path:
        return self.run_dir / name


def resolve_run_paths(run_dir: Path) -> RunPaths:
    return RunPaths(
        run_dir=run_dir,
        manifest_json=run_dir / "manifest.json",
        config_toml=run_dir / "config.toml",
        events_jsonl=run_dir / "events.jsonl",
    )


def init_run_dir(paths: RunPaths) -> None:
    paths.run_dir.mkdir(parents=True, exist_ok=True)
    # a rerun into the same directory starts a fresh event log
    paths.events_jsonl.write_text("", encoding="utf-8")


# ----- Writers -----


def to_jsonable(obj: Any) -> Any:
    """Recursively turn numpy scalars/arrays and complex numbers into JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(data: Any) -> str:
    return json.dumps(to_jsonable(data), indent=2, sort_keys=True) + "\n"


def write_json(path: Path, data: Any) -> None:
    path.write_text(dumps(data), encoding="utf-8")


def read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def write_csv(path: Path, rows: Iterable[dict[str, Any]], columns: Optional[Sequence[str]] = None) -> None:
    """Fixed float format and line endings so identical runs give identical bytes."""
    frame = pd.DataFrame(list(rows), columns=list(columns) if columns is not None else None)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")


def write_array_csv(path: Path, array: np.ndarray, columns: Sequence[str]) -> None:
    frame = pd.DataFrame(np.asarray(array, dtype=float), columns=list(columns))
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")


def read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path)


def write_mesh(path: Path, mesh: DiskMesh) -> None:
    path.write_text(mesh.to_off(), encoding="utf-8")


def append_event(paths: RunPaths, obj: dict[str, Any]) -> None:
    with paths.events_jsonl.open("a", encoding="utf-8") as f:
        f.write(json.dumps(to_jsonable(obj), ensure_ascii=False, sort_keys=True) + "\n")


# ----- Manifest -----


def save_manifest(paths: RunPaths, manifest: RunManifest) -> None:
    write_json(paths.manifest_json, manifest.to_dict())


def load_manifest(path: Path) -> RunManifest:
    """Load a manifest from a file or from the run directory holding it."""
    if path.is_dir():
        path = resolve_run_paths(path).manifest_json
    data = read_json(path)
    if not isinstance(data, dict) or "config_hash" not in data:
        raise ValueError(f"{path} is not a run manifest")
    return RunManifest.from_dict(data)

