from __future__ import annotations

from pathlib import Path

import pytest

from synthvit.config import build_config, validate_config
from synthvit.errors import ConfigError
from tests.conftest import EXAMPLE_CONFIG


def test_minimal_config_gets_defaults():
    cfg = build_config({})
    assert cfg.filter.max_keywords == 10
    assert cfg.filter.duplicate_threshold == 0.7
    assert cfg.limits.max_answer_chars == 500
    assert cfg.pool.rotation_interval == 5 and cfg.pool.rotation_fraction == 0.25
    assert cfg.generation.prompts_per_call == 20
    assert cfg.stage_plan.stage2_plan() == {
        "multi_image_similarity": 2, "multi_image_difference": 2, "multi_image_logical_relation": 1, "interleaved": 3,
    }


@pytest.mark.parametrize(
    "given,key",
    [
        ({"max_kws": 3}, "max_kws"),
        ({"filter": {"max_kws": 3}}, "filter.max_kws"),
        ({"pool": {"rotation_fraction": 1.5}}, "pool.rotation_fraction"),
        ({"seed": -1}, "seed"),
        ({"filter": {"max_keywords": True}}, "filter.max_keywords"),
        ({"stage_plan": {"stage2": {"multi_image": {"contrast": 1}}}}, "stage_plan.stage2.multi_image.contrast"),
        ({"abilities_dir": "does/not/exist"}, "abilities_dir"),
    ],
)
def test_config_errors_name_the_key(given, key):
    with pytest.raises(ConfigError) as info:
        build_config(given)
    assert info.value.key == key


def test_partial_multi_image_replaces_defaults():
    cfg = build_config({"stage_plan": {"stage2": {"multi_image": {"difference": 4}, "interleaved": 0}}})
    assert cfg.stage_plan.stage2_plan() == {"multi_image_difference": 4}


def test_stage1_targets_sources():
    cfg = build_config({"stage_plan": {"stage1": {"targets": {"a": 3}}}})
    assert cfg.stage_plan.stage1_plan(["a", "b"]) == {"a": 3}
    cfg = build_config({"stage_plan": {"stage1": {"from_specs": True}}})
    assert cfg.stage_plan.stage1_plan(["a"], {"a": 9}) == {"a": 9}


def test_config_hash_ignores_output_dir_but_tracks_mock_and_seed():
    a = build_config({"output_dir": "x"})
    b = build_config({"output_dir": "y"})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash(mock=True) != a.config_hash(mock=False)
    assert a.with_overrides(seed=5).config_hash() != a.config_hash()


def test_paths_resolve_against_config_file(tmp_path):
    (tmp_path / "abil").mkdir()
    path = tmp_path / "job.yaml"
    path.write_text("abilities_dir: abil\noutput_dir: out\n")
    cfg = validate_config(path)
    assert cfg.abilities_dir == tmp_path / "abil"
    assert cfg.output_dir == Path("out")


def test_shipped_configs_validate():
    cfg = validate_config(EXAMPLE_CONFIG)
    assert cfg.seed == 42 and cfg.abilities == ("color", "counting", "abnormality")
    validate_config(EXAMPLE_CONFIG.parent / "full_scale.yaml")


def test_bad_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("a: [1,\n")
    with pytest.raises(ConfigError):
        validate_config(path)
