"""
Tests for experiment config parsing, hashing and CLI overrides.

Run with: pytest tests/test_config.py -v
"""

from pathlib import Path

import pytest
from pydantic import ValidationError

from lorenzlab.config import (
    ExperimentConfig,
    StageName,
    apply_overrides,
    config_hash,
    dump_config,
    load_config,
    parse_config,
)

EXAMPLE = """
seed = 7
tol = 1e-8
output = "runs/lorenz"

[system]
name = "lorenz"

[budgets]
max_seconds = 600

[[stages]]
name = "orbit"
params = { duration = 50.0, h_out = 0.01 }

[[stages]]
name = "lyapunov"
params = { T = 100.0 }

[[stages]]
name = "splitting"
"""


def test_parse_example_config():
    config = parse_config(EXAMPLE)
    assert config.seed == 7
    assert config.tol == 1e-8
    assert config.system.name == "lorenz"
    assert config.budgets.max_seconds == 600
    assert config.stage_names() == ["orbit", "lyapunov", "splitting"]
    assert config.stages[0].params["duration"] == 50.0
    assert config.threads is None


def test_dump_and_parse_round_trip():
    config = parse_config(EXAMPLE)
    again = parse_config(dump_config(config))
    assert again == config
    assert config_hash(again) == config_hash(config)


def test_load_config_from_file(tmp_path: Path):
    path = tmp_path / "lab.toml"
    path.write_text(EXAMPLE, encoding="utf-8")
    assert load_config(path).seed == 7


def test_defaults():
    config = ExperimentConfig()
    assert config.system.name == "lorenz"
    assert config.tol == 1e-9
    assert config.output == "runs/default"
    assert config.stages == []


def test_unknown_system_is_a_validation_error():
    with pytest.raises(ValidationError, match="unknown system"):
        parse_config('[system]\nname = "rossler"\n')


def test_unknown_stage_is_a_validation_error():
    with pytest.raises(ValidationError):
        parse_config('[[stages]]\nname = "bifurcation"\n')


@pytest.mark.parametrize("text", ["tol = 0.0\n", "tol = 0.01\n", "threads = 0\n", "seed = -1\n"])
def test_out_of_range_settings(text):
    with pytest.raises(ValidationError):
        parse_config(text)


def test_stage_prerequisites_must_come_first():
    with pytest.raises(ValidationError, match="needs orbit earlier in the pipeline"):
        parse_config('[[stages]]\nname = "splitting"\n')
    with pytest.raises(ValidationError, match="needs recurrences"):
        parse_config('[[stages]]\nname = "orbit"\n[[stages]]\nname = "splitting"\n[[stages]]\nname = "pesin"\n[[stages]]\nname = "shadow"\n')


def test_stage_names_are_unique():
    names = [s.value for s in StageName]
    assert names[0] == "orbit"
    assert len(names) == len(set(names))


def test_hash_depends_on_content_not_formatting():
    a = parse_config(EXAMPLE)
    b = parse_config(EXAMPLE.replace("seed = 7", "seed    =   7"))
    c = parse_config(EXAMPLE.replace("seed = 7", "seed = 8"))
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)
    assert len(config_hash(a)) == 64


def test_overrides_return_a_validated_copy():
    config = parse_config(EXAMPLE)
    changed = apply_overrides(config, seed=3, tol=1e-10, output=Path("elsewhere"), threads=4)
    assert (changed.seed, changed.tol, changed.output, changed.threads) == (3, 1e-10, "elsewhere", 4)
    assert config.seed == 7
    assert apply_overrides(config) == config
    with pytest.raises(ValidationError):
        apply_overrides(config, tol=1.0)
