"""
Tests for run-directory layout, JSON/CSV writers and the manifest.

Run with: pytest tests/test_store.py -v
"""

import json
from pathlib import Path

import numpy as np
import pytest

from lorenzlab.entropy import seed_disk
from lorenzlab.store import (
    RunManifest,
    StageRecord,
    append_event,
    dumps,
    init_run_dir,
    load_manifest,
    read_csv,
    resolve_run_paths,
    save_manifest,
    to_jsonable,
    write_array_csv,
    write_csv,
    write_json,
    write_mesh,
)


def _manifest() -> RunManifest:
    manifest = RunManifest.new(config_hash="ab" * 32, version="0.1.0", system="lorenz", seed=1, tol=1e-9)
    manifest.stages.append(StageRecord(name="orbit", wall_time=0.5, artifacts=["orbit.csv"], summary={"samples": 10}))
    manifest.stages.append(StageRecord(name="lyapunov", passed=False, witness="lyapunov.witness.json"))
    manifest.status, manifest.exit_code, manifest.failed_stage = "gate_failed", 1, "lyapunov"
    manifest.skipped = ["entropy"]
    return manifest


def test_run_paths_layout(tmp_path: Path):
    paths = resolve_run_paths(tmp_path / "run")
    assert paths.manifest_json.name == "manifest.json"
    assert paths.config_toml.name == "config.toml"
    assert paths.artifact("x.json") == tmp_path / "run" / "x.json"
    init_run_dir(paths)
    assert paths.events_jsonl.read_text() == ""


def test_rerun_starts_a_fresh_event_log(tmp_path: Path):
    paths = resolve_run_paths(tmp_path)
    init_run_dir(paths)
    append_event(paths, {"type": "run_started", "n": np.int64(3)})
    append_event(paths, {"type": "run_finished"})
    lines = paths.events_jsonl.read_text().splitlines()
    assert [json.loads(line)["type"] for line in lines] == ["run_started", "run_finished"]
    assert json.loads(lines[0])["n"] == 3
    init_run_dir(paths)
    assert paths.events_jsonl.read_text() == ""


def test_manifest_round_trip(tmp_path: Path):
    paths = resolve_run_paths(tmp_path)
    init_run_dir(paths)
    manifest = _manifest()
    save_manifest(paths, manifest)
    loaded = load_manifest(paths.manifest_json)
    assert loaded.to_dict() == manifest.to_dict()
    assert loaded.stage("lyapunov").passed is False
    assert loaded.stage("census") is None


def test_load_manifest_from_the_run_directory(tmp_path: Path):
    paths = resolve_run_paths(tmp_path)
    save_manifest(paths, _manifest())
    assert load_manifest(tmp_path).failed_stage == "lyapunov"


@pytest.mark.parametrize("content", ["[1, 2, 3]", '{"status": "passed"}'])
def test_non_manifest_json_is_rejected(tmp_path: Path, content):
    path = tmp_path / "manifest.json"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(ValueError, match="not a run manifest"):
        load_manifest(path)


def test_to_jsonable_handles_numpy_and_complex_values():
    data = {
        1: np.float64(0.5),
        "arr": np.arange(3),
        "flag": np.bool_(True),
        "z": complex(1.0, -2.0),
        "path": Path("a/b"),
        "nested": (np.int32(4), [np.float32(0.25)]),
    }
    out = to_jsonable(data)
    assert out == {"1": 0.5, "arr": [0, 1, 2], "flag": True, "z": [1.0, -2.0], "path": "a/b", "nested": [4, [0.25]]}
    assert json.loads(dumps(data)) == out


def test_json_is_sorted_and_indented(tmp_path: Path):
    path = tmp_path / "x.json"
    write_json(path, {"b": 1, "a": 2})
    text = path.read_text()
    assert text.index('"a"') < text.index('"b"')
    assert text.endswith("}\n")


def test_csv_writers_are_byte_deterministic(tmp_path: Path):
    rows = [{"n": 1, "eps": 0.1, "upper": 1.0 / 3.0}, {"n": 2, "eps": 0.05, "upper": 2.0 / 3.0}]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(a, rows, ["n", "eps", "upper"])
    write_csv(b, list(rows), ["n", "eps", "upper"])
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines() == ["n,eps,upper", "1,0.1,0.3333333333", "2,0.05,0.6666666667"]
    assert b"\r\n" not in a.read_bytes()


def test_array_csv(tmp_path: Path):
    path = tmp_path / "orbit.csv"
    write_array_csv(path, np.array([[0.0, 1.0, 2.0], [0.5, 1.5, 2.5]]), ["t", "x0", "x1"])
    frame = read_csv(path)
    assert list(frame.columns) == ["t", "x0", "x1"]
    assert frame["x1"].tolist() == [2.0, 2.5]


def test_mesh_is_written_as_off(tmp_path: Path):
    mesh = seed_disk(np.zeros(3), np.eye(3)[:, 1:], 0.1, 2)
    path = tmp_path / "disk.off"
    write_mesh(path, mesh)
    lines = path.read_text().splitlines()
    assert lines[0] == "OFF"
    assert lines[1] == "9 8 0"
