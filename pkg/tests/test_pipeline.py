"""
Tests for the stage runner: exit codes, witnesses, events and budgets.

Run with: pytest tests/test_pipeline.py -v
"""

import json
import math
from pathlib import Path

import pytest

from lorenzlab.config import ExperimentConfig, StageName
from lorenzlab.events import EventBus
from lorenzlab.flow_core import build_system
from lorenzlab.pipeline import (
    EXIT_BUDGET,
    EXIT_GATE,
    EXIT_INPUT,
    EXIT_OK,
    STAGES,
    StageContext,
    run_pipeline,
    spread_seeds,
    stage_rng,
)
from lorenzlab.shadowing import PeriodicOrbitRecord, RecurrenceSeed, restricted_step_factors
from lorenzlab.store import init_run_dir, load_manifest, resolve_run_paths


def _config(tmp_path: Path, system: str, stages: list, **extra) -> ExperimentConfig:
    return ExperimentConfig.model_validate(
        {"system": {"name": system}, "output": str(tmp_path / "run"), "stages": stages, **extra}
    )


def _lyapunov(**params):
    return {"name": "lyapunov", "params": {"T": 100.0, "renorm_step": 1.0, **params}}


def test_empty_pipeline_passes(tmp_path: Path):
    manifest = run_pipeline(_config(tmp_path, "lorenz", []))
    assert manifest.status == "passed"
    assert manifest.exit_code == EXIT_OK
    run = tmp_path / "run"
    for name in ("manifest.json", "config.toml", "events.jsonl"):
        assert (run / name).exists()
    assert load_manifest(run).stages == []


def test_saddle_spectrum_passes_its_gate(tmp_path: Path):
    config = _config(tmp_path, "saddle", [_lyapunov(expected=[1.0, -2.0], expected_tol=1e-4)])
    manifest = run_pipeline(config)
    assert manifest.exit_code == EXIT_OK
    record = manifest.stage("lyapunov")
    assert record.passed is True
    assert record.artifacts == ["lyapunov.json", "exponents.csv"]
    data = json.loads((tmp_path / "run" / "lyapunov.json").read_text())
    assert data["exponents"] == pytest.approx([1.0, -2.0], abs=1e-6)


def test_failed_gate_writes_a_witness_and_skips_the_rest(tmp_path: Path):
    stages = [_lyapunov(expected=[2.0, -2.0]), {"name": "singularity"}]
    manifest = run_pipeline(_config(tmp_path, "saddle", stages))
    assert manifest.status == "gate_failed"
    assert manifest.exit_code == EXIT_GATE
    assert manifest.failed_stage == "lyapunov"
    assert manifest.skipped == ["singularity"]
    witness = json.loads((tmp_path / "run" / "lyapunov.witness.json").read_text())
    assert witness["checks"]["expected"] is False
    assert manifest.stage("lyapunov").witness == "lyapunov.witness.json"


def test_numerical_failure_is_a_gate_failure(tmp_path: Path):
    """The saddle orbit through (0, 1) leaves the divergence guard at t = log(1e4)."""
    stages = [{"name": "orbit", "params": {"duration": 20.0, "h_out": 0.1}}]
    manifest = run_pipeline(_config(tmp_path, "saddle", stages, x0=[0.0, 1.0]))
    assert manifest.exit_code == EXIT_GATE
    witness = json.loads((tmp_path / "run" / "orbit.witness.json").read_text())
    assert witness["error"] == "DivergenceError"
    assert witness["last_valid_time"] == pytest.approx(9.2103, abs=1e-3)


def test_unknown_stage_parameter_is_an_input_error(tmp_path: Path):
    manifest = run_pipeline(_config(tmp_path, "saddle", [_lyapunov(bogus=1)]))
    assert manifest.status == "input_error"
    assert manifest.exit_code == EXIT_INPUT
    assert "bogus" in manifest.stage("lyapunov").error


def test_bad_system_parameters_are_an_input_error(tmp_path: Path):
    config = ExperimentConfig.model_validate(
        {"system": {"name": "lorenz", "params": {"rho": 28.0}}, "output": str(tmp_path / "run"), "stages": [_lyapunov()]}
    )
    manifest = run_pipeline(config)
    assert manifest.exit_code == EXIT_INPUT
    assert manifest.skipped == ["lyapunov"]


def test_events_are_published_and_logged(tmp_path: Path):
    bus = EventBus()
    seen = []
    bus.on("*", lambda event: seen.append(event.type))
    run_pipeline(_config(tmp_path, "saddle", [_lyapunov()]), bus=bus)
    assert seen[0] == "run_started"
    assert seen[-1] == "run_finished"
    assert {"stage_started", "stage_finished", "artifact_written"} <= set(seen)
    lines = (tmp_path / "run" / "events.jsonl").read_text().splitlines()
    assert [json.loads(line)["type"] for line in lines] == seen


def test_identical_configs_give_identical_artifacts(tmp_path: Path):
    stages = [_lyapunov()]
    a = _config(tmp_path / "a", "saddle", stages)
    b = _config(tmp_path / "b", "saddle", stages)
    run_pipeline(a)
    run_pipeline(b)
    for name in ("lyapunov.json", "exponents.csv"):
        assert (tmp_path / "a" / "run" / name).read_bytes() == (tmp_path / "b" / "run" / name).read_bytes()


def test_doubling_map_entropy_recipe(tmp_path: Path):
    stages = [
        {
            "name": "entropy",
            "params": {"eps_grid": [0.1, 0.05, 0.025], "n_grid": [2, 3, 4, 5], "sample_size": 2048, "min_h_lower": 0.3},
        }
    ]
    manifest = run_pipeline(_config(tmp_path, "doubling", stages))
    assert manifest.exit_code == EXIT_OK
    data = json.loads((tmp_path / "run" / "entropy.json").read_text())
    assert data["h_lower"] <= data["h_upper"]
    assert (tmp_path / "run" / "entropy.csv").exists()


def test_iteration_budget_stops_the_run(tmp_path: Path):
    stages = [{"name": "entropy", "params": {"eps_grid": [0.2, 0.1, 0.05], "n_grid": [2, 3, 4, 5, 6], "sample_size": 100}}]
    manifest = run_pipeline(_config(tmp_path, "doubling", stages, budgets={"max_iterates": 400}))
    assert manifest.status == "budget_exceeded"
    assert manifest.exit_code == EXIT_BUDGET
    data = json.loads((tmp_path / "run" / "entropy.json").read_text())
    assert "budget_exceeded" in data["flags"]


def test_time_budget_skips_remaining_stages(tmp_path: Path):
    stages = [{"name": "orbit", "params": {"duration": 5.0, "h_out": 0.1}}, _lyapunov()]
    manifest = run_pipeline(_config(tmp_path, "saddle3", stages, budgets={"max_seconds": 1e-9}))
    assert manifest.exit_code == EXIT_BUDGET
    assert "lyapunov" in manifest.skipped


def test_stage_streams_are_independent():
    a = stage_rng(0, "entropy").random(3)
    b = stage_rng(0, "entropy").random(3)
    c = stage_rng(0, "expansiveness").random(3)
    assert (a == b).all()
    assert not (a == c).all()


def test_entropy_lower_bracket_is_checked_per_scale(tmp_path: Path):
    params = {"eps_grid": [0.1, 0.05, 0.025], "n_grid": [2, 3, 4, 5], "sample_size": 2048, "min_h_lower": 0.3}
    stages = [{"name": "entropy", "params": {**params, "lower_eps": [0.1, 0.05]}}]
    manifest = run_pipeline(_config(tmp_path, "doubling", stages))
    assert manifest.exit_code == EXIT_OK
    checks = manifest.stage("entropy").summary["checks"]
    assert checks["h_lower_eps=0.1"] is True
    assert checks["h_lower_eps=0.05"] is True


def test_entropy_scale_off_the_grid_is_an_input_error(tmp_path: Path):
    params = {"eps_grid": [0.1, 0.05, 0.025], "n_grid": [2, 3, 4], "sample_size": 256, "lower_eps": [0.3]}
    manifest = run_pipeline(_config(tmp_path, "doubling", [{"name": "entropy", "params": params}]))
    assert manifest.exit_code == EXIT_INPUT


# ----- Single stages on hand-built state -----


def _context(tmp_path: Path, system: str, name: str, params: dict, state: dict) -> StageContext:
    paths = resolve_run_paths(tmp_path / "run")
    init_run_dir(paths)
    return StageContext(
        name=name,
        config=_config(tmp_path, system, []),
        system=build_system(system),
        paths=paths,
        params=params,
        rng=stage_rng(0, name),
        state=state,
        run_id="test",
        bus=EventBus(),
    )


def _seed(T: float, start_index: int, start_time: float, itinerary: str = "", gap: float = 1e-3) -> RecurrenceSeed:
    return RecurrenceSeed(x=[0.0, 0.0, 0.0], T=T, gap=gap, start_time=start_time, start_index=start_index, itinerary=itinerary)


def test_short_seeds_are_certified_over_repeated_arcs(tmp_path: Path, drift_saddle, drift_field):
    _, fld = drift_field
    state = {
        "field": fld,
        "factors": restricted_step_factors(drift_saddle, fld, 1e-10),
        "seeds": [_seed(0.6, 20, float(fld.times[20]))],
    }
    params = {"T0": 1.0, "lam": math.exp(-0.9), "min_fraction": 0.9}
    result = STAGES[StageName.CERTIFY](_context(tmp_path, "drift_saddle", "certify", params, state))
    assert result.passed is True
    data = json.loads((tmp_path / "run" / "certify.json").read_text())
    assert data["attempted"] == 1
    assert data["arcs"][0]["repeats"] == 2
    assert data["arcs"][0]["partition"][-1] == pytest.approx(float(fld.times[44]))
    assert 20 in state["certificates"]


def test_certification_with_no_arcs_fails_its_gate(tmp_path: Path, drift_saddle, drift_field):
    _, fld = drift_field
    last = len(fld) - 10
    state = {
        "field": fld,
        "factors": restricted_step_factors(drift_saddle, fld, 1e-10),
        "seeds": [_seed(0.6, last, float(fld.times[last]))],
    }
    result = STAGES[StageName.CERTIFY](_context(tmp_path, "drift_saddle", "certify", {"T0": 1.0}, state))
    assert result.passed is False
    assert result.summary["attempted"] == 0
    assert result.summary["waived"] == 1
    assert result.summary["checks"]["attempted"] is False
    assert result.witness is not None


def test_shadow_stage_checks_the_shortest_period(tmp_path: Path):
    x = [1.0, 0.0, 0.0]
    seed = RecurrenceSeed(x=x, T=2.0 * math.pi, gap=1e-12, start_time=0.0, start_index=0)
    common = {"gap_scaling": False, "shortest_tol": 1e-6}

    def run(**params):
        ctx = _context(tmp_path, "hopf_saddle", "shadow", {**common, **params}, {"seeds": [seed]})
        return STAGES[StageName.SHADOW](ctx)

    found = run(expected_shortest=2.0 * math.pi)
    assert found.passed is True
    assert found.summary["shortest_period"] == pytest.approx(2.0 * math.pi, abs=1e-8)
    assert run(expected_shortest=3.0).summary["checks"]["shortest"] is False
    missing = run(expected_shortest=2.0 * math.pi, shortest_itinerary="LR")
    assert missing.passed is False
    assert missing.summary["shortest_period"] is None


def test_seed_selection_spreads_over_itineraries():
    seeds = (
        [_seed(2.3, i, float(i), "LLR", gap=1e-3 * (i + 1)) for i in range(5)]
        + [_seed(3.0, 10 + i, 10.0 + i, "LLRR", gap=1e-3) for i in range(3)]
        + [_seed(1.56, 20, 20.0, "RL", gap=0.3)]
    )
    picked = spread_seeds(seeds, 4)
    assert [s.itinerary for s in picked] == ["RL", "LLR", "LLRR", "LLR"]
    assert picked[1].gap == pytest.approx(1e-3)
    assert len(spread_seeds(seeds, 50)) == len(seeds)


def _orbit_record(period: float, itinerary: str) -> PeriodicOrbitRecord:
    return PeriodicOrbitRecord(
        point=[0.0, 0.0, 0.0],
        period=period,
        primitive_period=period,
        multiplicity=1,
        itinerary=itinerary,
        seed_x=[0.0, 0.0, 0.0],
        seed_T=period,
        seed_gap=1e-3,
        theta_fit=[[0.0, 0.0], [period, period]],
        c_bound=0.0,
        d_bound=1.0,
        floquet=[[5.0, 0.0], [1.0, 0.0], [0.1, 0.0]],
        newton_residual=1e-12,
        newton_iterations=1,
        residual_history=[1e-12],
        segments=1,
    )


def test_census_needs_distinct_itineraries(tmp_path: Path):
    # ten orbits but only two lobe words
    records = [_orbit_record(1.5 + 0.4 * i, "LR" if i % 2 else "LLR") for i in range(10)]
    params = {"T_max": 6.0, "min_orbits": 10}
    result = STAGES[StageName.CENSUS](_context(tmp_path, "lorenz", "census", params, {"records": records}))
    assert result.summary["orbits"] == 10
    assert result.summary["checks"]["orbits"] is True
    assert result.summary["checks"]["itineraries"] is False
    assert result.passed is False
