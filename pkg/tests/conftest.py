from __future__ import annotations

import json
from pathlib import Path

import pytest

from synthvit.config import build_config
from synthvit.templates import AbilitySpec, AttributeRule

ROOT = Path(__file__).resolve().parents[1]
GOLDENS = Path(__file__).resolve().parent / "goldens"
EXAMPLE_CONFIG = ROOT / "configs" / "example.yaml"


def load_golden(name: str):
    return json.loads((GOLDENS / name).read_text(encoding="utf-8"))


@pytest.fixture
def ability() -> AbilitySpec:
    return AbilitySpec(
        ability_id="profession",
        display_name="Profession recognition",
        capability_instructions="Show the person's job through clothing and tools.",
        cautions=("One person per image.",),
        keyword_pool=("construction worker", "chef", "nurse"),
        question_pool=("What is this person's job?", "Is the person a chef or a nurse?"),
        attribute_rules=(AttributeRule("construction worker", ("hard hat", "high-visibility vest")),),
        in_context_examples=("((chef)), kitchen, white hat", "((nurse)), hospital corridor, scrubs"),
    )


def small_config(tmp_path: Path, **overrides):
    """Example-sized job config rooted in ``tmp_path``."""
    raw = {
        "job_id": "test",
        "seed": 7,
        "output_dir": str(tmp_path / "job"),
        "abilities": ["color", "counting", "abnormality"],
        "generation": {"prompts_per_call": 12, "pairs_per_call": 4, "new_keywords": 6, "new_questions": 3},
        "stage_plan": {
            "stage1": {"per_ability": 10},
            "stage2": {"multi_image": {"similarity": 2, "difference": 2, "logical_relation": 1}, "interleaved": 3},
        },
    }
    for key, value in overrides.items():
        raw[key] = value
    return build_config(raw, base_dir=tmp_path)


# ---------------------------------------------------------------------------
# Acceptance summary
# ---------------------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    """Print one PASS/FAIL line and keep it for the end-of-run summary."""
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
