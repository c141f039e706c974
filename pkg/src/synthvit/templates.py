"""Ability specs, instruction templates, and rotating in-context example pools."""

from __future__ import annotations

import enum
import math
import random
import re
from dataclasses import dataclass, field, replace
from decimal import Decimal
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .errors import MissingSlot, SpecError
from .schema import is_slug

DEFAULT_ROTATION_INTERVAL = 5
DEFAULT_ROTATION_FRACTION = 0.25

ABILITY_DIALOGUE_KINDS = ("stage1_description", "abnormality")


class TemplateKind(str, enum.Enum):
    PROMPT_GEN = "prompt_gen"
    STAGE1_DIALOGUE = "stage1_dialogue"
    PAIRED_PROMPT_GEN = "paired_prompt_gen"
    PAIR_CAPTION_GEN = "pair_caption_gen"
    MULTI_IMAGE_DIALOGUE = "multi_image_dialogue"
    PHASE_GEN = "phase_gen"
    INTERLEAVED_DIALOGUE = "interleaved_dialogue"
    KEYWORD_POOL_GEN = "keyword_pool_gen"
    QUESTION_POOL_GEN = "question_pool_gen"
    JUDGE = "judge"

    @property
    def filename(self) -> str:
        return f"{self.value}.txt"


def data_path(*parts: str) -> Path:
    """Location of a file shipped inside the package."""
    return Path(str(resources.files("synthvit"))).joinpath("data", *parts)


# ---------------------------------------------------------------------------
# Ability specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttributeRule:
    trigger_keyword: str
    injected_keywords: tuple[str, ...]


@dataclass(frozen=True)
class AbilitySpec:
    ability_id: str
    display_name: str
    capability_instructions: str
    cautions: tuple[str, ...] = ()
    keyword_pool: tuple[str, ...] = ()
    question_pool: tuple[str, ...] = ()
    attribute_rules: tuple[AttributeRule, ...] = ()
    target_count: int = 0
    dialogue_kind: str = "stage1_description"
    in_context_examples: tuple[str, ...] = ()
    rotation_interval: int | None = None
    rotation_fraction: float | None = None

    def with_pools(
        self, keywords: Sequence[str] | None = None, questions: Sequence[str] | None = None
    ) -> AbilitySpec:
        return replace(
            self,
            keyword_pool=self.keyword_pool if keywords is None else tuple(keywords),
            question_pool=self.question_pool if questions is None else tuple(questions),
        )


_SPEC_KEYS = {
    "ability_id": str,
    "display_name": str,
    "capability_instructions": str,
    "cautions": list,
    "keyword_pool": list,
    "question_pool": list,
    "attribute_rules": list,
    "target_count": int,
    "dialogue_kind": str,
    "in_context_examples": list,
    "rotation": dict,
}
_REQUIRED_SPEC_KEYS = ("ability_id", "display_name", "capability_instructions")


def _str_list(raw: list, file: str, key: str) -> tuple[str, ...]:
    for i, item in enumerate(raw):
        if not isinstance(item, str) or not item.strip():
            raise SpecError(file, f"{key}[{i}]", "expected a non-empty string")
    return tuple(item.strip() for item in raw)


def parse_ability_spec(raw: Any, file: str) -> AbilitySpec:
    if not isinstance(raw, dict):
        raise SpecError(file, "$", "spec file must contain a mapping")
    for key, value in raw.items():
        if key not in _SPEC_KEYS:
            raise SpecError(file, str(key), "unknown key")
        expected = _SPEC_KEYS[key]
        if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
            raise SpecError(file, key, f"expected {expected.__name__}")
    for key in _REQUIRED_SPEC_KEYS:
        if key not in raw or not raw[key].strip():
            raise SpecError(file, key, "required")

    ability_id = raw["ability_id"]
    if not is_slug(ability_id):
        raise SpecError(file, "ability_id", "must be lowercase letters, digits and underscores")
    target = raw.get("target_count", 0)
    if target < 0:
        raise SpecError(file, "target_count", "must be >= 0")
    kind = raw.get("dialogue_kind", "stage1_description")
    if kind not in ABILITY_DIALOGUE_KINDS:
        raise SpecError(file, "dialogue_kind", f"must be one of {ABILITY_DIALOGUE_KINDS}")

    rules = []
    for i, rule in enumerate(raw.get("attribute_rules", [])):
        path = f"attribute_rules[{i}]"
        if not isinstance(rule, dict) or set(rule) != {"trigger", "inject"}:
            raise SpecError(file, path, "expected {trigger, inject}")
        if not isinstance(rule["trigger"], str) or not rule["trigger"].strip():
            raise SpecError(file, path + ".trigger", "expected a non-empty string")
        if not isinstance(rule["inject"], list) or not rule["inject"]:
            raise SpecError(file, path + ".inject", "expected a non-empty list")
        rules.append(
            AttributeRule(rule["trigger"].strip(), _str_list(rule["inject"], file, path + ".inject"))
        )

    rotation = raw.get("rotation", {})
    for key in rotation:
        if key not in ("interval", "fraction"):
            raise SpecError(file, f"rotation.{key}", "unknown key")
    interval = rotation.get("interval")
    if interval is not None and (not isinstance(interval, int) or interval < 1):
        raise SpecError(file, "rotation.interval", "must be an integer >= 1")
    fraction = rotation.get("fraction")
    if fraction is not None and not (isinstance(fraction, (int, float)) and 0 <= fraction <= 1):
        raise SpecError(file, "rotation.fraction", "must be in [0, 1]")

    return AbilitySpec(
        ability_id=ability_id,
        display_name=raw["display_name"].strip(),
        capability_instructions=raw["capability_instructions"].strip(),
        cautions=_str_list(raw.get("cautions", []), file, "cautions"),
        keyword_pool=_str_list(raw.get("keyword_pool", []), file, "keyword_pool"),
        question_pool=_str_list(raw.get("question_pool", []), file, "question_pool"),
        attribute_rules=tuple(rules),
        target_count=target,
        dialogue_kind=kind,
        in_context_examples=_str_list(raw.get("in_context_examples", []), file, "in_context_examples"),
        rotation_interval=interval,
        rotation_fraction=None if fraction is None else float(fraction),
    )


def load_ability_specs(dir_path: str | Path) -> list[AbilitySpec]:
    """Load every ``*.yaml`` / ``*.yml`` / ``*.json`` spec in a directory, sorted by filename."""
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise SpecError(str(dir_path), "$", "not a directory")
    files = sorted(
        p for p in dir_path.iterdir() if p.suffix in (".yaml", ".yml", ".json") and p.is_file()
    )
    specs: list[AbilitySpec] = []
    seen: dict[str, str] = {}
    for path in files:
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise SpecError(path.name, "$", f"invalid YAML: {exc}") from None
        spec = parse_ability_spec(raw, path.name)
        if spec.ability_id in seen:
            raise SpecError(
                path.name, "ability_id", f"{spec.ability_id!r} already defined in {seen[spec.ability_id]}"
            )
        seen[spec.ability_id] = path.name
        specs.append(spec)
    return specs


# ---------------------------------------------------------------------------
# In-context pools
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InContextPool:
    """Few-shot examples ordered oldest first."""

    examples: tuple[str, ...]
    capacity: int
    rotation_interval: int = DEFAULT_ROTATION_INTERVAL
    rotation_fraction: float = DEFAULT_ROTATION_FRACTION
    batches_since_rotation: int = 0

    def __post_init__(self) -> None:
        if len(self.examples) > self.capacity:
            raise ValueError(f"{len(self.examples)} examples exceed capacity {self.capacity}")
        if self.rotation_interval < 1:
            raise ValueError("rotation_interval must be >= 1")
        if not 0 <= self.rotation_fraction <= 1:
            raise ValueError("rotation_fraction must be in [0, 1]")

    @classmethod
    def from_examples(
        cls,
        examples: Sequence[str],
        capacity: int,
        rotation_interval: int = DEFAULT_ROTATION_INTERVAL,
        rotation_fraction: float = DEFAULT_ROTATION_FRACTION,
    ) -> InContextPool:
        kept = tuple(examples)[-capacity:] if capacity else ()
        return cls(kept, capacity, rotation_interval, rotation_fraction)

    def with_examples(self, examples: Sequence[str]) -> InContextPool:
        return replace(self, examples=tuple(examples))


def replacement_count(fraction: float, size: int, supply: int) -> int:
    # Decimal(str()) keeps 0.1 * 30 at exactly 3 rather than 3.0000000000000004
    wanted = math.ceil(Decimal(str(fraction)) * size)
    return min(wanted, supply, size)


def rotate_pool(pool: InContextPool, fresh: Sequence[str]) -> InContextPool:
    """Advance the batch counter; on the interval boundary swap the oldest examples for fresh ones."""
    if pool.batches_since_rotation + 1 < pool.rotation_interval:
        return replace(pool, batches_since_rotation=pool.batches_since_rotation + 1)
    k = replacement_count(pool.rotation_fraction, len(pool.examples), len(fresh))
    examples = pool.examples[k:] + tuple(fresh[:k])
    return replace(pool, examples=examples, batches_since_rotation=0)


def sample_pool(pool: InContextPool, n: int, rng_seed: int) -> list[str]:
    """Pick ``min(n, len(pool))`` distinct examples, returned in pool order."""
    if n < 0:
        raise ValueError("n must be >= 0")
    k = min(n, len(pool.examples))
    picked = sorted(random.Random(rng_seed).sample(range(len(pool.examples)), k))
    return [pool.examples[i] for i in picked]


def load_examples_file(path: str | Path) -> list[str]:
    """Read example blocks separated by lines consisting of ``---``."""
    text = Path(path).read_text(encoding="utf-8")
    blocks = re.split(r"^---\s*$", text, flags=re.MULTILINE)
    return [b.strip() for b in blocks if b.strip()]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


_SLOT = re.compile(r"\{\{|\}\}|\{([A-Za-z_][A-Za-z0-9_]*)\}")


def template_slots(template: str) -> list[str]:
    return [m.group(1) for m in _SLOT.finditer(template) if m.group(1)]


def fill_template(template: str, bindings: Mapping[str, Any]) -> str:
    """Substitute ``{name}`` markers; ``{{`` and ``}}`` are literal braces."""

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name is None:
            return m.group(0)[0]
        if name not in bindings:
            raise MissingSlot(name)
        return str(bindings[name])

    return _SLOT.sub(sub, template)


def format_examples(examples: Sequence[str]) -> str:
    if not examples:
        return "(no examples available)"
    return "\n\n".join(f"Example {i}:\n{text}" for i, text in enumerate(examples, start=1))


def ability_bindings(ability: AbilitySpec) -> dict[str, str]:
    return {
        "ability_id": ability.ability_id,
        "ability_name": ability.display_name,
        "capability_instructions": ability.capability_instructions,
        "cautions": "\n".join(f"- {c}" for c in ability.cautions) or "- none",
        "keywords": ", ".join(ability.keyword_pool) or "(none)",
        "questions": "\n".join(f"- {q}" for q in ability.question_pool) or "(none)",
    }


@dataclass
class TemplateSet:
    """One template text per TemplateKind, loaded from a directory."""

    texts: dict[TemplateKind, str] = field(default_factory=dict)
    examples_dir: Path | None = None

    @classmethod
    def load(cls, dir_path: str | Path | None = None) -> TemplateSet:
        dir_path = Path(dir_path) if dir_path else data_path("templates")
        texts = {}
        for kind in TemplateKind:
            path = dir_path / kind.filename
            if not path.is_file():
                raise SpecError(str(path), "$", f"missing template for {kind.value}")
            texts[kind] = path.read_text(encoding="utf-8")
        examples = dir_path / "examples"
        return cls(texts, examples if examples.is_dir() else None)

    def __getitem__(self, kind: TemplateKind | str) -> str:
        return self.texts[TemplateKind(kind)]

    def seed_examples(self, name: str) -> list[str]:
        if self.examples_dir is None:
            return []
        path = self.examples_dir / f"{name}.txt"
        return load_examples_file(path) if path.is_file() else []


def render_template(
    kind: TemplateKind | str,
    ability: AbilitySpec | None,
    pool: InContextPool | None,
    slots: Mapping[str, Any],
    templates: TemplateSet | None = None,
) -> str:
    """Render one instruction template.

    Bindings come from the ability, then the pool (as ``{examples}``), then
    ``slots``, later sources overriding earlier ones.
    """
    templates = templates or default_templates()
    bindings: dict[str, Any] = {}
    if ability is not None:
        bindings.update(ability_bindings(ability))
    bindings["examples"] = format_examples(pool.examples if pool is not None else ())
    bindings.update(slots)
    return fill_template(templates[kind], bindings)


_default_templates: TemplateSet | None = None


def default_templates() -> TemplateSet:
    global _default_templates
    if _default_templates is None:
        _default_templates = TemplateSet.load()
    return _default_templates
