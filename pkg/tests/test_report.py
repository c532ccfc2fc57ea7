"""
Tests for the Markdown run digest.

Run with: pytest tests/test_report.py -v
"""

from pathlib import Path

import pytest

from lorenzlab.config import ExperimentConfig
from lorenzlab.pipeline import run_pipeline
from lorenzlab.report import build_report


def _run(tmp_path: Path, stages: list) -> Path:
    config = ExperimentConfig.model_validate({"system": {"name": "saddle"}, "output": str(tmp_path / "run"), "stages": stages})
    run_pipeline(config)
    return tmp_path / "run"


LYAPUNOV = {"name": "lyapunov", "params": {"T": 100.0, "renorm_step": 1.0}}


def test_run_without_stages_gets_a_stub(tmp_path: Path):
    run = _run(tmp_path, [])
    text, warnings = build_report(run)
    assert "# Run report: saddle" in text
    assert "No stages were run." in text
    assert warnings == []


def test_report_lists_stages_and_exponents(tmp_path: Path):
    run = _run(tmp_path, [LYAPUNOV, {"name": "singularity"}])
    text, warnings = build_report(run / "manifest.json")
    assert "| lyapunov | PASS |" in text
    assert "## Lyapunov exponents" in text
    assert "## Singularities" in text
    assert warnings == []


def test_failed_stage_and_skipped_stages_are_shown(tmp_path: Path):
    failing = {"name": "lyapunov", "params": {"T": 100.0, "expected": [3.0, 3.0]}}
    run = _run(tmp_path, [failing, {"name": "singularity"}])
    text, _ = build_report(run)
    assert "Failed stage: **lyapunov**" in text
    assert "lyapunov.witness.json" in text
    assert "| singularity | skipped | |" in text


def test_corrupt_artifact_becomes_a_warning(tmp_path: Path):
    run = _run(tmp_path, [LYAPUNOV])
    (run / "lyapunov.json").write_text("{not json", encoding="utf-8")
    text, warnings = build_report(run)
    assert any("could not be read" in w for w in warnings)
    assert "## Lyapunov exponents" not in text
    assert "## Warnings" in text


def test_non_object_artifact_becomes_a_warning(tmp_path: Path):
    run = _run(tmp_path, [LYAPUNOV])
    (run / "lyapunov.json").write_text("[1, 2]", encoding="utf-8")
    _, warnings = build_report(run)
    assert warnings == ["lyapunov.json does not hold a JSON object"]


def test_missing_artifacts_are_reported(tmp_path: Path):
    run = _run(tmp_path, [LYAPUNOV])
    (run / "lyapunov.json").unlink()
    (run / "exponents.csv").unlink()
    _, warnings = build_report(run)
    assert "lyapunov.json is missing" in warnings
    assert "listed artifact exponents.csv is missing" in warnings


def test_bad_manifest_raises(tmp_path: Path):
    (tmp_path / "manifest.json").write_text('{"stages": []}', encoding="utf-8")
    with pytest.raises(ValueError):
        build_report(tmp_path)
